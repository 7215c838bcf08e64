//! Discrete electromagnetic states and the weighted Hilbert space they
//! live in.
//!
//! A [`FieldState`] stores the discrete pair u = (Eᵀ, Hᵀ)ᵀ as one flat
//! vector. The companion [`FieldLayout`] records how vector slots map to
//! field components and grid locations, and carries the diagonal
//! quadrature weights (built from ε, μ and cell measures) that define the
//! weighted inner product ⟨u, v⟩_H = Σ w_k u_k v_k ≈ ∫ (ε E·E' + μ H·H').

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which physical component a vector slot stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    E,
    H,
    Hx,
    Hy,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::E => "E",
            Component::H => "H",
            Component::Hx => "Hx",
            Component::Hy => "Hy",
        }
    }
}

/// One slot of the flat state vector: component and grid location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub component: Component,
    pub x: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y: Option<f64>,
}

/// Slot map and quadrature weights of one spatial discretization.
///
/// The first `e_len` slots hold electric degrees of freedom, the
/// remaining `h_len` hold magnetic ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldLayout {
    /// Backend identifier, e.g. "grid1d", "tm2d", "spectral".
    pub backend: String,
    pub e_len: usize,
    pub h_len: usize,
    /// Diagonal of the weight matrix W defining ⟨·,·⟩_H; length e_len + h_len.
    #[serde(with = "crate::io::dvector_serde")]
    pub weights: DVector<f64>,
    /// Material coefficient per slot (ε on E slots, μ on H slots), so
    /// weights = material × quadrature measure.
    #[serde(with = "crate::io::dvector_serde")]
    pub material: DVector<f64>,
    pub slots: Vec<Slot>,
}

impl FieldLayout {
    pub fn new(
        backend: impl Into<String>,
        e_len: usize,
        h_len: usize,
        weights: DVector<f64>,
        material: DVector<f64>,
        slots: Vec<Slot>,
    ) -> Result<Arc<Self>> {
        let dim = e_len + h_len;
        if weights.len() != dim || slots.len() != dim || material.len() != dim {
            return Err(Error::LayoutMismatch(format!(
                "layout of dimension {dim} given {} weights, {} material values and {} slots",
                weights.len(),
                material.len(),
                slots.len()
            )));
        }
        if weights
            .iter()
            .chain(material.iter())
            .any(|&w| !(w > 0.0) || !w.is_finite())
        {
            return Err(Error::LayoutMismatch(
                "weights and material coefficients must be positive and finite".into(),
            ));
        }
        Ok(Arc::new(Self {
            backend: backend.into(),
            e_len,
            h_len,
            weights,
            material,
            slots,
        }))
    }

    pub fn dim(&self) -> usize {
        self.e_len + self.h_len
    }

    pub fn e_range(&self) -> std::ops::Range<usize> {
        0..self.e_len
    }

    pub fn h_range(&self) -> std::ops::Range<usize> {
        self.e_len..self.dim()
    }
}

/// A discrete (E, H) state tied to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub layout: Arc<FieldLayout>,
    pub data: DVector<f64>,
}

impl FieldState {
    pub fn zeros(layout: Arc<FieldLayout>) -> Self {
        let dim = layout.dim();
        Self {
            layout,
            data: DVector::zeros(dim),
        }
    }

    pub fn from_vector(layout: Arc<FieldLayout>, data: DVector<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "vector of length {} for layout of dimension {}",
                data.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    fn check_same_layout(&self, other: &FieldState) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "operands use layouts `{}`(dim {}) and `{}`(dim {})",
                self.layout.backend,
                self.layout.dim(),
                other.layout.backend,
                other.layout.dim()
            )))
        }
    }

    /// Weighted inner product ⟨u, v⟩_H.
    pub fn inner_product(&self, other: &FieldState) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .zip(self.layout.weights.iter())
            .map(|((&u, &v), &w)| w * u * v)
            .sum())
    }

    /// Energy functional 𝓗(u) = ‖u‖²_H.
    pub fn energy(&self) -> f64 {
        self.inner_product(self).expect("state matches its own layout")
    }

    /// Weighted norm ‖u‖_H.
    pub fn norm_h(&self) -> f64 {
        self.energy().sqrt()
    }

    /// In-place self += alpha * other.
    pub fn axpy(&mut self, alpha: f64, other: &FieldState) {
        debug_assert_eq!(self.layout.dim(), other.layout.dim());
        self.data.axpy(alpha, &other.data, 1.0);
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        self.data *= alpha;
    }

    pub fn e_part(&self) -> DVector<f64> {
        DVector::from(self.data.rows(0, self.layout.e_len).into_owned())
    }

    pub fn h_part(&self) -> DVector<f64> {
        DVector::from(self.data.rows(self.layout.e_len, self.layout.h_len).into_owned())
    }

    pub fn with_data(&self, data: DVector<f64>) -> Self {
        debug_assert_eq!(data.len(), self.layout.dim());
        Self {
            layout: Arc::clone(&self.layout),
            data,
        }
    }
}

impl Add for &FieldState {
    type Output = FieldState;
    fn add(self, rhs: &FieldState) -> FieldState {
        debug_assert_eq!(self.layout.dim(), rhs.layout.dim());
        self.with_data(&self.data + &rhs.data)
    }
}

impl Sub for &FieldState {
    type Output = FieldState;
    fn sub(self, rhs: &FieldState) -> FieldState {
        debug_assert_eq!(self.layout.dim(), rhs.layout.dim());
        self.with_data(&self.data - &rhs.data)
    }
}

impl Mul<f64> for &FieldState {
    type Output = FieldState;
    fn mul(self, alpha: f64) -> FieldState {
        self.with_data(&self.data * alpha)
    }
}

impl Neg for &FieldState {
    type Output = FieldState;
    fn neg(self) -> FieldState {
        self.with_data(-&self.data)
    }
}

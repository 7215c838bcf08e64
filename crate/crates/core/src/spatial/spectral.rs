//! Spectral Hamiltonian backend on [0, L] with constant ε, μ.
//!
//! E is expanded in the orthonormal sine modes √(2/L)·sin(k_j x) and H in
//! the matching cosine modes, k_j = jπ/L. In coefficient space the
//! operator is the Hamiltonian block matrix
//!
//! ```text
//! M = [ 0        ε⁻¹K ]        K = diag(k_1..k_m)
//!     [ −μ⁻¹K    0    ]
//! ```
//!
//! so every operation decouples into per-mode 2×2 blocks: shifted solves
//! are closed-form and exp(tM) is an exact rotation with angular
//! frequency ω_j = k_j/√(εμ). This is also the backend whose tangent
//! flow is exactly canonical, which the symplectic diagnostics rely on.

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::field::{Component, FieldLayout, FieldState, Slot};
use crate::spatial::MaxwellOperator;

pub struct SpectralOperator {
    layout: Arc<FieldLayout>,
    /// Wavenumbers k_j = jπ/L, j = 1..m.
    k: Vec<f64>,
    pub eps: f64,
    pub mu: f64,
    pub l: f64,
}

/// Builds the spectral operator with `m` modes.
pub fn build_spectral_hamiltonian(m: usize, l: f64, eps: f64, mu: f64) -> Result<Arc<SpectralOperator>> {
    if m < 1 {
        return Err(Error::InvalidConfig("spectral backend requires m >= 1".into()));
    }
    if !(l > 0.0 && eps > 0.0 && mu > 0.0) {
        return Err(Error::InvalidConfig(
            "spectral backend requires positive L, eps and mu".into(),
        ));
    }
    let k: Vec<f64> = (1..=m).map(|j| j as f64 * std::f64::consts::PI / l).collect();

    // Orthonormal modes: ∫ ε E² dx = ε Σ ê_j², so the coefficient-space
    // weights are just ε (E slots) and μ (H slots). Slot "x" records the
    // wavenumber of the mode.
    let mut slots = Vec::with_capacity(2 * m);
    let mut weights = DVector::zeros(2 * m);
    for (j, &kj) in k.iter().enumerate() {
        slots.push(Slot { component: Component::E, x: kj, y: None });
        weights[j] = eps;
    }
    for (j, &kj) in k.iter().enumerate() {
        slots.push(Slot { component: Component::H, x: kj, y: None });
        weights[m + j] = mu;
    }
    let material = weights.clone(); // unit measure in coefficient space
    let layout = FieldLayout::new("spectral", m, m, weights, material, slots)
        .expect("spectral layout is consistent by construction");
    Ok(Arc::new(SpectralOperator { layout, k, eps, mu, l }))
}

impl SpectralOperator {
    pub fn mode_count(&self) -> usize {
        self.k.len()
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }
}

impl MaxwellOperator for SpectralOperator {
    fn layout(&self) -> &Arc<FieldLayout> {
        &self.layout
    }

    fn apply(&self, u: &FieldState) -> FieldState {
        let m = self.k.len();
        let mut out = DVector::zeros(2 * m);
        for j in 0..m {
            out[j] = self.k[j] * u.data[m + j] / self.eps;
            out[m + j] = -self.k[j] * u.data[j] / self.mu;
        }
        u.with_data(out)
    }

    fn solve_shifted(&self, gamma: f64, rhs: &FieldState) -> Result<FieldState> {
        let m = self.k.len();
        let mut out = DVector::zeros(2 * m);
        for j in 0..m {
            // (I − γM) restricted to mode j is [[1, −γk/ε], [γk/μ, 1]].
            let ae = gamma * self.k[j] / self.eps;
            let ah = gamma * self.k[j] / self.mu;
            let det = 1.0 + ae * ah;
            let (re, rh) = (rhs.data[j], rhs.data[m + j]);
            out[j] = (re + ae * rh) / det;
            out[m + j] = (rh - ah * re) / det;
        }
        Ok(rhs.with_data(out))
    }

    fn solve_shifted_complex(
        &self,
        gamma: Complex<f64>,
        rhs_re: &DVector<f64>,
        rhs_im: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = self.k.len();
        let dim = 2 * m;
        if rhs_re.len() != dim || rhs_im.len() != dim {
            return Err(Error::LayoutMismatch("complex rhs dimension".into()));
        }
        let mut out_re = DVector::zeros(dim);
        let mut out_im = DVector::zeros(dim);
        for j in 0..m {
            let ae = gamma * self.k[j] / self.eps;
            let ah = gamma * self.k[j] / self.mu;
            let det = Complex::new(1.0, 0.0) + ae * ah;
            let re = Complex::new(rhs_re[j], rhs_im[j]);
            let rh = Complex::new(rhs_re[m + j], rhs_im[m + j]);
            let xe = (re + ae * rh) / det;
            let xh = (rh - ah * re) / det;
            out_re[j] = xe.re;
            out_im[j] = xe.im;
            out_re[m + j] = xh.re;
            out_im[m + j] = xh.im;
        }
        Ok((out_re, out_im))
    }

    fn norm_estimate(&self) -> f64 {
        // Exact: the largest singular value of M in ⟨·,·⟩_H is
        // ω_max = k_max/√(εμ).
        self.k.last().copied().unwrap_or(0.0) / (self.eps * self.mu).sqrt()
    }

    fn exp_apply(&self, t: f64, u: &FieldState) -> Option<FieldState> {
        let m = self.k.len();
        let ratio_he = (self.mu / self.eps).sqrt();
        let mut out = DVector::zeros(2 * m);
        for j in 0..m {
            let omega = self.k[j] / (self.eps * self.mu).sqrt();
            let (s, c) = (omega * t).sin_cos();
            let (e, h) = (u.data[j], u.data[m + j]);
            out[j] = e * c + h * ratio_he * s;
            out[m + j] = h * c - e / ratio_he * s;
        }
        Some(u.with_data(out))
    }
}

//! Staggered 1D discretization on [0, L] with PEC boundaries.
//!
//! E lives at the interior nodes x_1..x_m (boundary values are
//! eliminated, enforcing n×E = 0 strongly), H at the half nodes
//! x_{1/2}..x_{m+1/2}, with dx = L/(m+1). The semi-discrete system is
//!
//! ```text
//! ε_j dE_j/dt = (H_j − H_{j+1})/dx,          j = 0..m−1
//! μ_i dH_i/dt = −(E_i − E_{i−1})/dx,         i = 0..m,  E_{−1}=E_m=0
//! ```
//!
//! whose difference matrices are exact transposes, making M skew-adjoint
//! in the weighted inner product with weights (ε_j dx, μ_i dx).

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::field::{Component, FieldLayout, FieldState, Slot};
use crate::spatial::{solve_symmetric_tridiagonal, MaxwellOperator};

/// 1D grid description. ε and μ may vary in space as per-node values.
#[derive(Debug, Clone)]
pub struct Grid1D {
    /// Interior E-node count.
    pub m: usize,
    /// Domain length.
    pub l: f64,
    /// ε at the m interior nodes.
    pub eps: Vec<f64>,
    /// μ at the m+1 half nodes.
    pub mu: Vec<f64>,
}

impl Grid1D {
    pub fn uniform(m: usize, l: f64, eps: f64, mu: f64) -> Result<Self> {
        Self::new(m, l, vec![eps; m], vec![mu; m + 1])
    }

    pub fn new(m: usize, l: f64, eps: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidConfig("grid1d requires m >= 2".into()));
        }
        if !(l > 0.0) {
            return Err(Error::InvalidConfig("grid1d requires L > 0".into()));
        }
        if eps.len() != m || mu.len() != m + 1 {
            return Err(Error::InvalidConfig(format!(
                "grid1d with m={m} needs {m} eps values and {} mu values",
                m + 1
            )));
        }
        if eps.iter().chain(mu.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("eps and mu must be positive".into()));
        }
        Ok(Self { m, l, eps, mu })
    }

    pub fn dx(&self) -> f64 {
        self.l / (self.m as f64 + 1.0)
    }
}

/// The assembled 1D operator with its precomputed layout.
pub struct Maxwell1D {
    layout: Arc<FieldLayout>,
    grid: Grid1D,
}

/// Builds the staggered 1D Maxwell operator.
pub fn build_maxwell_1d(grid: Grid1D) -> Arc<Maxwell1D> {
    let m = grid.m;
    let dx = grid.dx();
    let mut slots = Vec::with_capacity(2 * m + 1);
    let mut weights = DVector::zeros(2 * m + 1);
    let mut material = DVector::zeros(2 * m + 1);
    for j in 0..m {
        slots.push(Slot {
            component: Component::E,
            x: (j as f64 + 1.0) * dx,
            y: None,
        });
        weights[j] = grid.eps[j] * dx;
        material[j] = grid.eps[j];
    }
    for i in 0..=m {
        slots.push(Slot {
            component: Component::H,
            x: (i as f64 + 0.5) * dx,
            y: None,
        });
        weights[m + i] = grid.mu[i] * dx;
        material[m + i] = grid.mu[i];
    }
    let layout = FieldLayout::new("grid1d", m, m + 1, weights, material, slots)
        .expect("grid1d layout is consistent by construction");
    Arc::new(Maxwell1D { layout, grid })
}

impl Maxwell1D {
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Solves the Schur complement on the H slots:
    /// (diag(μ) + γ² D_e diag(ε⁻¹) D_eᵀ) x_H = diag(μ) r_H − γ D_e r_E,
    /// then recovers x_E = r_E + γ ε⁻¹ D_h x_H. Works for real or complex
    /// γ; `T` is the scalar type of γ and the solution.
    fn schur_solve<T>(&self, gamma: T, rhs_e: &[T], rhs_h: &[T]) -> (Vec<T>, Vec<T>)
    where
        T: Copy
            + From<f64>
            + std::ops::Add<Output = T>
            + std::ops::Sub<Output = T>
            + std::ops::Mul<Output = T>
            + std::ops::Div<Output = T>,
    {
        let m = self.grid.m;
        let dx = self.grid.dx();
        let g2 = gamma * gamma;
        let inv_dx2 = 1.0 / (dx * dx);

        // Tridiagonal Schur complement on the m+1 magnetic unknowns.
        let mut diag = vec![T::from(0.0); m + 1];
        let mut off = vec![T::from(0.0); m];
        for i in 0..=m {
            let mut stencil = 0.0;
            if i < m {
                stencil += inv_dx2 / self.grid.eps[i];
            }
            if i > 0 {
                stencil += inv_dx2 / self.grid.eps[i - 1];
            }
            diag[i] = T::from(self.grid.mu[i]) + g2 * T::from(stencil);
        }
        for i in 0..m {
            off[i] = T::from(0.0) - g2 * T::from(inv_dx2 / self.grid.eps[i]);
        }

        // Right-hand side: diag(μ) r_H − γ D_e r_E with
        // (D_e r_E)_i = (r_E[i] − r_E[i−1])/dx, ghost zeros.
        let mut b = vec![T::from(0.0); m + 1];
        for i in 0..=m {
            let hi = if i < m { rhs_e[i] } else { T::from(0.0) };
            let lo = if i > 0 { rhs_e[i - 1] } else { T::from(0.0) };
            b[i] = T::from(self.grid.mu[i]) * rhs_h[i] - gamma * (hi - lo) * T::from(1.0 / dx);
        }
        solve_symmetric_tridiagonal(&diag, &off, &mut b);
        let x_h = b;

        // x_E = r_E + γ ε⁻¹ D_h x_H, (D_h x_H)_j = (x_H[j] − x_H[j+1])/dx.
        let mut x_e = vec![T::from(0.0); m];
        for j in 0..m {
            x_e[j] = rhs_e[j]
                + gamma * (x_h[j] - x_h[j + 1]) * T::from(1.0 / (dx * self.grid.eps[j]));
        }
        (x_e, x_h)
    }
}

impl MaxwellOperator for Maxwell1D {
    fn layout(&self) -> &Arc<FieldLayout> {
        &self.layout
    }

    fn apply(&self, u: &FieldState) -> FieldState {
        let m = self.grid.m;
        let dx = self.grid.dx();
        let e = &u.data.as_slice()[..m];
        let h = &u.data.as_slice()[m..];
        let mut out = DVector::zeros(2 * m + 1);
        for j in 0..m {
            out[j] = (h[j] - h[j + 1]) / (dx * self.grid.eps[j]);
        }
        for i in 0..=m {
            let hi = if i < m { e[i] } else { 0.0 };
            let lo = if i > 0 { e[i - 1] } else { 0.0 };
            out[m + i] = -(hi - lo) / (dx * self.grid.mu[i]);
        }
        u.with_data(out)
    }

    fn solve_shifted(&self, gamma: f64, rhs: &FieldState) -> Result<FieldState> {
        let m = self.grid.m;
        let (x_e, x_h) = self.schur_solve(gamma, &rhs.data.as_slice()[..m], &rhs.data.as_slice()[m..]);
        let mut data = DVector::zeros(2 * m + 1);
        data.as_mut_slice()[..m].copy_from_slice(&x_e);
        data.as_mut_slice()[m..].copy_from_slice(&x_h);
        Ok(rhs.with_data(data))
    }

    fn solve_shifted_complex(
        &self,
        gamma: Complex<f64>,
        rhs_re: &DVector<f64>,
        rhs_im: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = self.grid.m;
        let dim = 2 * m + 1;
        if rhs_re.len() != dim || rhs_im.len() != dim {
            return Err(Error::LayoutMismatch("complex rhs dimension".into()));
        }
        let rhs: Vec<Complex<f64>> = (0..dim)
            .map(|k| Complex::new(rhs_re[k], rhs_im[k]))
            .collect();
        let (x_e, x_h) = self.schur_solve(gamma, &rhs[..m], &rhs[m..]);
        let mut out_re = DVector::zeros(dim);
        let mut out_im = DVector::zeros(dim);
        for (k, z) in x_e.iter().chain(x_h.iter()).enumerate() {
            out_re[k] = z.re;
            out_im[k] = z.im;
        }
        Ok((out_re, out_im))
    }
}

//! Discrete Maxwell operators.
//!
//! Each backend provides a skew-adjoint operator M in the weighted inner
//! product of its [`FieldLayout`], together with shifted resolvent solves
//! (I − γM)⁻¹ for the implicit stages. Three discretizations are offered:
//!
//! * [`grid1d`] — staggered 1D finite differences with PEC boundaries and
//!   piecewise-constant ε(x), μ(x); tridiagonal direct solves.
//! * [`tm2d`] — mimetic 2D TM staggering (E_z at cell centers, H on
//!   faces) with an exact discrete div∘curl = 0 identity; CG solves.
//! * [`spectral`] — mixed sine/cosine mode basis with constant ε, μ;
//!   mode-wise 2×2 solves and an exact semigroup.

pub mod grid1d;
pub mod spectral;
pub mod tm2d;

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex;

use crate::error::Result;
use crate::field::{FieldLayout, FieldState};

pub use grid1d::{build_maxwell_1d, Grid1D};
pub use spectral::{build_spectral_hamiltonian, SpectralOperator};
pub use tm2d::{build_maxwell_2d_tm, Grid2DTm};

/// A discrete Maxwell operator, skew-adjoint in the layout's weighted
/// inner product. Implementations are immutable after construction and
/// safe to share across threads.
pub trait MaxwellOperator: Send + Sync {
    fn layout(&self) -> &Arc<FieldLayout>;

    /// Applies u ↦ Mu.
    fn apply(&self, u: &FieldState) -> FieldState;

    /// Solves (I − γM)x = rhs for real γ. Since M is skew-adjoint the
    /// solution always satisfies ‖x‖_H ≤ ‖rhs‖_H.
    fn solve_shifted(&self, gamma: f64, rhs: &FieldState) -> Result<FieldState>;

    /// Solves (I − γM)x = rhs for complex γ, splitting x = x_re + i·x_im.
    /// Needed for tableaux whose coefficient matrix has complex
    /// eigenvalue pairs.
    fn solve_shifted_complex(
        &self,
        gamma: Complex<f64>,
        rhs_re: &DVector<f64>,
        rhs_im: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)>;

    /// An upper estimate of the operator norm ‖M‖_H, used for the stage
    /// fixed-point contraction check. The default runs a short power
    /// iteration on −M² (positive semidefinite in ⟨·,·⟩_H).
    fn norm_estimate(&self) -> f64 {
        let layout = Arc::clone(self.layout());
        let dim = layout.dim();
        let seed_data = DVector::from_fn(dim, |k, _| (1.3 * k as f64 + 0.7).sin());
        let mut v = FieldState::from_vector(layout, seed_data).expect("dimension matches");
        let mut lambda: f64 = 0.0;
        for _ in 0..60 {
            let nv = v.norm_h();
            if nv == 0.0 {
                return 0.0;
            }
            v.scale_mut(1.0 / nv);
            let w = &self.apply(&(-&self.apply(&v))); // −M²v
            lambda = w.inner_product(&v).expect("same layout");
            v = w.clone();
        }
        // 1.05 head-room: power iteration approaches the top eigenvalue
        // from below.
        1.05 * lambda.max(0.0).sqrt()
    }

    /// Exact semigroup exp(tM) when the backend has a spectral
    /// decomposition; `None` otherwise.
    fn exp_apply(&self, _t: f64, _u: &FieldState) -> Option<FieldState> {
        None
    }

    /// Discrete divergence of the magnetic field at interior nodes, when
    /// the backend defines one (2D TM only).
    fn divergence_h(&self, _u: &FieldState) -> Option<DVector<f64>> {
        None
    }
}

/// Deterministic pseudo-random state with entries in (−1, 1), used by
/// sampling-based probes (resolvent bounds, norm spot checks) that need
/// reproducible generic vectors without threading an RNG through.
pub fn seeded_state(layout: &Arc<FieldLayout>, salt: u64) -> FieldState {
    let data = DVector::from_fn(layout.dim(), |k, _| {
        ((k as f64 + 1.0) * 12.9898 + salt as f64 * 78.233).sin() * 43758.5453 % 1.0
    });
    FieldState::from_vector(Arc::clone(layout), data).expect("dimension matches")
}

/// Solves a symmetric tridiagonal system in place (Thomas algorithm).
/// `diag` has length n, `off` length n−1 (entry k couples unknowns k and
/// k+1); `rhs` is overwritten with the solution.
pub(crate) fn solve_symmetric_tridiagonal<T>(diag: &[T], off: &[T], rhs: &mut [T])
where
    T: Copy
        + std::ops::Sub<Output = T>
        + std::ops::Mul<Output = T>
        + std::ops::Div<Output = T>,
{
    let n = diag.len();
    debug_assert_eq!(off.len(), n.saturating_sub(1));
    debug_assert_eq!(rhs.len(), n);
    if n == 0 {
        return;
    }
    // Forward elimination with scratch copies of the pivots.
    let mut d: Vec<T> = diag.to_vec();
    for k in 1..n {
        let w = off[k - 1] / d[k - 1];
        d[k] = d[k] - w * off[k - 1];
        rhs[k] = rhs[k] - w * rhs[k - 1];
    }
    rhs[n - 1] = rhs[n - 1] / d[n - 1];
    for k in (0..n - 1).rev() {
        rhs[k] = (rhs[k] - off[k] * rhs[k + 1]) / d[k];
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use nalgebra::DMatrix;

    /// Densely assembles M by applying the operator to basis vectors.
    pub fn dense_operator(op: &dyn MaxwellOperator) -> DMatrix<f64> {
        let layout = Arc::clone(op.layout());
        let dim = layout.dim();
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = FieldState::zeros(Arc::clone(&layout));
            e.data[j] = 1.0;
            m.set_column(j, &op.apply(&e).data);
        }
        m
    }

    /// Deterministic pseudo-random state for oracle tests.
    pub fn pseudo_random_state(layout: &Arc<FieldLayout>, salt: u64) -> FieldState {
        let data = DVector::from_fn(layout.dim(), |k, _| {
            ((k as f64 + 1.0) * 12.9898 + salt as f64 * 78.233).sin() * 43758.5453 % 1.0
        });
        FieldState::from_vector(Arc::clone(layout), data).unwrap()
    }
}

//! Structure-preserving stochastic Runge-Kutta integration for semilinear
//! stochastic Maxwell-type equations with additive Q-Wiener noise.
//!
//! The crate is organised around a small set of building blocks:
//!
//! * [`tableau`] — Butcher tableaux of s-stage stochastic Runge-Kutta
//!   methods and their structural classification (algebraic stability,
//!   coercivity, symplecticity).
//! * [`spatial`] — discrete skew-adjoint Maxwell operators (1D staggered,
//!   2D TM mimetic, spectral), weighted inner products and shifted solves.
//! * [`noise`] — truncated Karhunen-Loève sampling of the Q-Wiener process
//!   and the additive diffusion map B(t).
//! * [`model`] — problem instances: operator + drift + noise + initial data.
//! * [`integrator`] — the s-stage implicit steppers and tangent propagation.
//! * [`diagnostics`] — energy law, divergence, symplectic 2-form, resolvent
//!   and moment probes.
//! * [`harness`] — Monte Carlo driving and mean-square convergence studies.

pub mod diagnostics;
pub mod error;
pub mod field;
pub mod harness;
pub mod integrator;
pub mod io;
pub mod model;
pub mod noise;
pub mod spatial;
pub mod tableau;

pub use nalgebra;

pub use error::{Error, Result};
pub use field::{Component, FieldLayout, FieldState};
pub use tableau::{ButcherTableau, Coercivity, TableauReport};

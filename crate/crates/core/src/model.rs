//! Problem instances: spatial operator + drift + noise + initial data.
//!
//! The drift F is a Nemytskij (nodewise) operator
//! F(t,u) = (−ε⁻¹J_e(t,x,E,H), −μ⁻¹J_m(t,x,E,H)). Every kind carries
//! enough metadata for the stage solver (a Lipschitz constant) and for
//! the symplectic diagnostics (whether the Jacobian is symmetric with
//! respect to the canonical 2-form).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldLayout, FieldState};
use crate::noise::{apply_b, hs_norm_sq, CovarianceSpec, ModeFamily, NoiseProfile, Profile};
use crate::spatial::{
    build_maxwell_1d, build_maxwell_2d_tm, build_spectral_hamiltonian, Grid1D, Grid2DTm,
    MaxwellOperator,
};

/// Signature of user-supplied drift callbacks.
pub type DriftFn = dyn Fn(f64, &FieldState) -> FieldState + Send + Sync;

/// The drift operator F.
#[derive(Clone)]
pub enum DriftSpec {
    Zero,
    /// F = (−σ_e E/ε, −σ_m H/μ), the conductive-damping currents
    /// J_e = σ_e E, J_m = σ_m H.
    LinearDamping { sigma_e: f64, sigma_m: f64 },
    /// F(t,u) = matrix·u + time_factor(t)·offset.
    Affine {
        matrix: Arc<DMatrix<f64>>,
        offset: Arc<DVector<f64>>,
        time_profile: Profile,
    },
    /// Arbitrary Lipschitz drift; the declared constant gates the stage
    /// fixed-point iteration. An analytic Jacobian action is optional
    /// (central finite differences otherwise).
    Custom {
        f: Arc<DriftFn>,
        jacobian: Option<Arc<dyn Fn(f64, &FieldState, &FieldState) -> FieldState + Send + Sync>>,
        lipschitz: f64,
        declared_hamiltonian: bool,
    },
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriftSpec::Zero => write!(f, "Zero"),
            DriftSpec::LinearDamping { sigma_e, sigma_m } => {
                write!(f, "LinearDamping {{ sigma_e: {sigma_e}, sigma_m: {sigma_m} }}")
            }
            DriftSpec::Affine { .. } => write!(f, "Affine {{ .. }}"),
            DriftSpec::Custom { lipschitz, .. } => {
                write!(f, "Custom {{ lipschitz: {lipschitz}, .. }}")
            }
        }
    }
}

impl DriftSpec {
    pub fn is_zero(&self) -> bool {
        matches!(self, DriftSpec::Zero)
    }

    /// F is affine in u (exact one-shot stage linear solve applies).
    pub fn is_affine(&self) -> bool {
        matches!(
            self,
            DriftSpec::Zero | DriftSpec::LinearDamping { .. } | DriftSpec::Affine { .. }
        )
    }

    /// A Lipschitz constant of u ↦ F(t,u) in ‖·‖_H.
    pub fn lipschitz(&self, layout: &FieldLayout) -> f64 {
        match self {
            DriftSpec::Zero => 0.0,
            DriftSpec::LinearDamping { sigma_e, sigma_m } => {
                let mut bound: f64 = 0.0;
                for k in layout.e_range() {
                    bound = bound.max(sigma_e.abs() / layout.material[k]);
                }
                for k in layout.h_range() {
                    bound = bound.max(sigma_m.abs() / layout.material[k]);
                }
                bound
            }
            // Crude but safe: weighted-norm bound via the max column sum
            // scaled by the weight spread.
            DriftSpec::Affine { matrix, .. } => {
                let wmax = layout.weights.max();
                let wmin = layout.weights.min();
                matrix.norm() * (wmax / wmin).sqrt()
            }
            DriftSpec::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    /// Whether the tangent map of F is symmetric with respect to the
    /// canonical 2-form (constant ε, μ): the hypothesis behind the
    /// symplecticity theorem for the drift part.
    pub fn declared_hamiltonian(&self, eps: f64, mu: f64) -> bool {
        match self {
            DriftSpec::Zero => true,
            // J_F = diag(−σ_e/ε·I, −σ_m/μ·I); ΩJ_F is symmetric exactly
            // when σ_e/ε = −σ_m/μ.
            DriftSpec::LinearDamping { sigma_e, sigma_m } => {
                (sigma_e / eps + sigma_m / mu).abs() <= 1e-14 * (sigma_e.abs() / eps + sigma_m.abs() / mu + 1.0)
            }
            DriftSpec::Affine { .. } => false,
            DriftSpec::Custom { declared_hamiltonian, .. } => *declared_hamiltonian,
        }
    }
}

/// A complete integration problem. Immutable and shareable; all eval
/// methods are reentrant.
pub struct Problem {
    pub operator: Arc<dyn MaxwellOperator>,
    pub drift: DriftSpec,
    pub covariance: CovarianceSpec,
    pub profile: NoiseProfile,
    pub u0: FieldState,
    /// Time horizon T.
    pub horizon: f64,
}

impl Problem {
    pub fn new(
        operator: Arc<dyn MaxwellOperator>,
        drift: DriftSpec,
        covariance: CovarianceSpec,
        profile: NoiseProfile,
        u0: FieldState,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidConfig("horizon T must be positive".into()));
        }
        if u0.layout != *operator.layout() {
            return Err(Error::LayoutMismatch(
                "initial condition does not match the operator layout".into(),
            ));
        }
        Ok(Self { operator, drift, covariance, profile, u0, horizon })
    }

    pub fn layout(&self) -> &Arc<FieldLayout> {
        self.operator.layout()
    }

    /// Evaluates the drift F(t, u).
    pub fn eval_f(&self, t: f64, u: &FieldState) -> FieldState {
        let layout = self.layout();
        match &self.drift {
            DriftSpec::Zero => FieldState::zeros(Arc::clone(layout)),
            DriftSpec::LinearDamping { sigma_e, sigma_m } => {
                let mut data = DVector::zeros(layout.dim());
                for k in layout.e_range() {
                    data[k] = -sigma_e * u.data[k] / layout.material[k];
                }
                for k in layout.h_range() {
                    data[k] = -sigma_m * u.data[k] / layout.material[k];
                }
                u.with_data(data)
            }
            DriftSpec::Affine { matrix, offset, time_profile } => {
                let data = matrix.as_ref() * &u.data + offset.as_ref() * time_profile.eval(t, 0.0);
                u.with_data(data)
            }
            DriftSpec::Custom { f, .. } => f(t, u),
        }
    }

    /// Directional derivative of F at u along `direction`. Linear kinds
    /// are exact; custom drifts without an analytic Jacobian fall back
    /// to central differences with step h = 1e-6·(1+‖u‖_H).
    pub fn eval_f_jacobian(&self, t: f64, u: &FieldState, direction: &FieldState) -> FieldState {
        match &self.drift {
            DriftSpec::Zero => FieldState::zeros(Arc::clone(self.layout())),
            DriftSpec::LinearDamping { .. } => self.eval_f(t, direction),
            DriftSpec::Affine { matrix, .. } => u.with_data(matrix.as_ref() * &direction.data),
            DriftSpec::Custom { jacobian: Some(j), .. } => j(t, u, direction),
            DriftSpec::Custom { f, .. } => {
                let dn = direction.norm_h();
                if dn == 0.0 {
                    return FieldState::zeros(Arc::clone(self.layout()));
                }
                let h = 1e-6 * (1.0 + u.norm_h());
                let unit = direction * (1.0 / dn);
                let fp = f(t, &(u + &(&unit * h)));
                let fm = f(t, &(u - &(&unit * h)));
                &(&fp - &fm) * (dn / (2.0 * h))
            }
        }
    }

    /// The diffusion field B(t) applied to KL coefficients.
    pub fn apply_b(&self, t: f64, coeffs: &DVector<f64>) -> FieldState {
        apply_b(t, coeffs, &self.profile, &self.covariance, self.layout())
    }

    /// Σ_i λ_i‖B(t)e_i‖²_H.
    pub fn hs_norm_sq(&self, t: f64) -> f64 {
        hs_norm_sq(t, &self.profile, &self.covariance, self.layout())
    }

    pub fn lipschitz(&self) -> f64 {
        self.drift.lipschitz(self.layout())
    }
}

// --- JSON problem configuration --------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Grid1d { m: usize, length: f64, eps: f64, mu: f64 },
    Tm2d { nx: usize, ny: usize, dx: f64, dy: f64, eps: f64, mu: f64 },
    Spectral { modes: usize, length: f64, eps: f64, mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftConfig {
    Zero,
    LinearDamping { sigma_e: f64, sigma_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceConfig {
    /// KL truncation level J.
    pub j: usize,
    /// Explicit eigenvalues; defaults to λ_i = i⁻² when omitted.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    Zero,
    /// Lowest sine mode in E, H at rest.
    SingleMode,
    /// A Gaussian bump in E centered in the domain.
    GaussianBump,
}

/// Serializable description of a [`Problem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub backend: BackendConfig,
    pub drift: DriftConfig,
    pub covariance: CovarianceConfig,
    pub profile: NoiseProfile,
    pub u0: InitialCondition,
    pub horizon: f64,
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("problem config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build(&self) -> Result<Problem> {
        let operator: Arc<dyn MaxwellOperator> = match self.backend {
            BackendConfig::Grid1d { m, length, eps, mu } => {
                build_maxwell_1d(Grid1D::uniform(m, length, eps, mu)?)
            }
            BackendConfig::Tm2d { nx, ny, dx, dy, eps, mu } => {
                build_maxwell_2d_tm(Grid2DTm::new(nx, ny, dx, dy, eps, mu)?)
            }
            BackendConfig::Spectral { modes, length, eps, mu } => {
                build_spectral_hamiltonian(modes, length, eps, mu)?
            }
        };
        let drift = match self.drift {
            DriftConfig::Zero => DriftSpec::Zero,
            DriftConfig::LinearDamping { sigma_e, sigma_m } => {
                DriftSpec::LinearDamping { sigma_e, sigma_m }
            }
        };
        let family = match self.backend {
            BackendConfig::Grid1d { length, .. } => ModeFamily::SineOnInterval { length },
            BackendConfig::Tm2d { nx, dx, .. } => ModeFamily::SineOnInterval {
                length: nx as f64 * dx,
            },
            BackendConfig::Spectral { .. } => ModeFamily::SpectralCoeff,
        };
        let lambdas = match &self.covariance.lambdas {
            Some(l) => {
                if l.len() != self.covariance.j {
                    return Err(Error::InvalidConfig(format!(
                        "covariance declares J={} but lists {} eigenvalues",
                        self.covariance.j,
                        l.len()
                    )));
                }
                l.clone()
            }
            None => (1..=self.covariance.j)
                .map(|i| 1.0 / (i as f64 * i as f64))
                .collect(),
        };
        let covariance = CovarianceSpec::new(lambdas, family)?;
        let u0 = initial_condition(self.u0, operator.layout());
        Problem::new(operator, drift, covariance, self.profile, u0, self.horizon)
    }
}

fn initial_condition(kind: InitialCondition, layout: &Arc<FieldLayout>) -> FieldState {
    let mut u = FieldState::zeros(Arc::clone(layout));
    match kind {
        InitialCondition::Zero => {}
        InitialCondition::SingleMode => {
            if layout.backend == "spectral" {
                u.data[0] = 1.0;
            } else {
                // Slots span (0, L); the largest slot coordinate is a
                // close L estimate, good enough for a smooth preset.
                let l = layout.slots.iter().map(|s| s.x).fold(0.0, f64::max);
                for k in layout.e_range() {
                    u.data[k] = (std::f64::consts::PI * layout.slots[k].x / l).sin();
                }
            }
        }
        InitialCondition::GaussianBump => {
            let xmax = layout.slots.iter().map(|s| s.x).fold(0.0, f64::max);
            let ymax = layout
                .slots
                .iter()
                .filter_map(|s| s.y)
                .fold(0.0, f64::max);
            for k in layout.e_range() {
                let slot = &layout.slots[k];
                let dx = (slot.x - 0.5 * xmax) / (0.15 * xmax);
                let mut arg = dx * dx;
                if let Some(y) = slot.y {
                    let dy = (y - 0.5 * ymax) / (0.15 * ymax);
                    arg += dy * dy;
                }
                u.data[k] = (-arg).exp();
            }
        }
    }
    u
}

//! Diagnostics quantifying how computed trajectories honor the physical
//! and geometric laws of the continuous problem: the energy trace law,
//! divergence conservation, symplectic 2-form preservation, resolvent
//! bounds, and moment/Hölder regularity probes.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::FieldState;
use crate::integrator::{StagePreconditioner, TangentFrame, Trajectory};
use crate::model::Problem;
use crate::spatial::MaxwellOperator;
use crate::tableau::{ButcherTableau, Coercivity};

/// A time series with optional Monte Carlo standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
    /// Raised when the replica count is too small for the standard
    /// errors to mean anything (< 2 replicas).
    pub low_replicas: bool,
}

impl DiagnosticSeries {
    pub fn worst(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    /// Writes `time,value,stderr` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write as _;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "time,value,stderr")?;
        for (i, (&t, &v)) in self.times.iter().zip(&self.values).enumerate() {
            let se = self.stderr.as_ref().map_or(f64::NAN, |s| s[i]);
            writeln!(w, "{t:.17e},{v:.17e},{se:.17e}")?;
        }
        Ok(())
    }
}

/// Machine-readable verdict for one diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticSummary {
    pub name: String,
    pub verdict: &'static str,
    pub worst_value: f64,
    pub tolerance: f64,
}

impl DiagnosticSummary {
    pub fn judge(name: impl Into<String>, worst_value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            verdict: if worst_value <= tolerance { "PASS" } else { "FAIL" },
            worst_value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == "PASS"
    }
}

fn common_times(trajectories: &[Trajectory]) -> Result<Vec<f64>> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::DiagnosticPrecondition("no trajectories given".into()))?;
    for t in trajectories.iter().skip(1) {
        if t.times != first.times {
            return Err(Error::DiagnosticPrecondition(
                "replicas were recorded on different time grids".into(),
            ));
        }
    }
    Ok(first.times.clone())
}

/// Residual of the discrete energy trace law: mean 𝓗(u^n) minus the
/// predicted 𝓗(u0) + ∫(2⟨u,F⟩_H + ‖B(s)‖²_HS) ds, with a left-endpoint
/// quadrature along each trajectory. With fewer than two replicas the
/// point estimate is still produced and `low_replicas` is raised.
pub fn energy_law_residual(
    trajectories: &[Trajectory],
    problem: &Problem,
) -> Result<DiagnosticSeries> {
    let times = common_times(trajectories)?;
    let r = trajectories.len();
    let n_t = times.len();

    // Per replica: residual_n = 𝓗(u^n) − predicted_n.
    let mut residuals = vec![vec![0.0f64; r]; n_t];
    for (rep, traj) in trajectories.iter().enumerate() {
        let mut predicted = traj.states[0].energy();
        residuals[0][rep] = 0.0;
        for n in 1..n_t {
            let dt = times[n] - times[n - 1];
            let u_prev = &traj.states[n - 1];
            let t_prev = times[n - 1];
            let f = problem.eval_f(t_prev, u_prev);
            let drift_term = 2.0 * u_prev.inner_product(&f)?;
            predicted += dt * (drift_term + problem.hs_norm_sq(t_prev));
            residuals[n][rep] = traj.states[n].energy() - predicted;
        }
    }

    let mut values = Vec::with_capacity(n_t);
    let mut stderr = Vec::with_capacity(n_t);
    for row in &residuals {
        let mean = row.iter().sum::<f64>() / r as f64;
        values.push(mean);
        let se = if r >= 2 {
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        } else {
            f64::NAN
        };
        stderr.push(se);
    }
    Ok(DiagnosticSeries { times, values, stderr: Some(stderr), low_replicas: r < 2 })
}

/// Mean energy per time with standard errors (helper for slope fits).
pub fn mean_energy_series(trajectories: &[Trajectory]) -> Result<DiagnosticSeries> {
    let times = common_times(trajectories)?;
    let r = trajectories.len();
    let mut values = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for n in 0..times.len() {
        let es: Vec<f64> = trajectories.iter().map(|t| t.states[n].energy()).collect();
        let mean = es.iter().sum::<f64>() / r as f64;
        values.push(mean);
        stderr.push(if r >= 2 {
            let var = es.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        } else {
            f64::NAN
        });
    }
    Ok(DiagnosticSeries { times, values, stderr: Some(stderr), low_replicas: r < 2 })
}

/// Least-squares line fit; returns (slope, intercept).
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fits the growth rate of energy vs time per replica and aggregates:
/// returns (mean slope, standard error of the mean).
pub fn energy_growth_rate(trajectories: &[Trajectory]) -> Result<(f64, f64)> {
    let times = common_times(trajectories)?;
    if trajectories.len() < 2 {
        return Err(Error::DiagnosticPrecondition(
            "energy growth rate needs >= 2 replicas".into(),
        ));
    }
    let slopes: Vec<f64> = trajectories
        .iter()
        .map(|t| fit_line(&times, &t.energies()).0)
        .collect();
    let r = slopes.len() as f64;
    let mean = slopes.iter().sum::<f64>() / r;
    let var = slopes.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (r - 1.0);
    Ok((mean, (var / r).sqrt()))
}

/// Drift of the discrete magnetic divergence along one trajectory:
/// values are ‖div_h(μH^n) − div_h(μH^0)‖_∞. Requires a backend with a
/// divergence map (2D TM).
pub fn divergence_drift(trajectory: &Trajectory, problem: &Problem) -> Result<DiagnosticSeries> {
    let mu = |u: &FieldState| -> Result<DVector<f64>> {
        problem.operator.divergence_h(u).ok_or_else(|| {
            Error::DiagnosticPrecondition(
                "divergence diagnostic requires the 2D TM backend".into(),
            )
        })
    };
    // μ is constant on the TM backend, so div(μH) = μ·div(H); the
    // relative drift is unaffected by the constant.
    let mu_const = problem.layout().material[problem.layout().e_len];
    let div0 = mu(&trajectory.states[0])? * mu_const;
    let values: Vec<f64> = trajectory
        .states
        .iter()
        .map(|u| {
            let d = mu(u).expect("backend checked above") * mu_const;
            (d - &div0).amax()
        })
        .collect();
    Ok(DiagnosticSeries {
        times: trajectory.times.clone(),
        values,
        stderr: None,
        low_replicas: false,
    })
}

/// Frobenius residual ‖JᵀΩJ − Ω‖_F of a tangent frame against the
/// canonical 2-form Ω = ω·[[0, I], [−I, 0]]. Only meaningful on the
/// spectral backend, whose coordinates are canonical.
pub fn symplectic_residual(frame: &TangentFrame, problem: &Problem, omega_weight: f64) -> Result<f64> {
    let layout = problem.layout();
    if layout.backend != "spectral" {
        return Err(Error::DiagnosticPrecondition(format!(
            "symplectic residual needs canonical coordinates (spectral backend), got `{}`",
            layout.backend
        )));
    }
    if !problem.drift.declared_hamiltonian(layout.material[0], layout.material[layout.e_len]) {
        return Err(Error::DiagnosticPrecondition(
            "symplectic residual is only defined for Hamiltonian drifts".into(),
        ));
    }
    let m = layout.e_len;
    let j = frame.matrix();
    if j.ncols() != layout.dim() {
        return Err(Error::DiagnosticPrecondition(
            "tangent frame must span the full state space".into(),
        ));
    }
    let mut omega = DMatrix::zeros(2 * m, 2 * m);
    for k in 0..m {
        omega[(k, m + k)] = omega_weight;
        omega[(m + k, k)] = -omega_weight;
    }
    let residual = j.transpose() * &omega * &j - &omega;
    Ok(residual.norm())
}

/// Result of the resolvent bound probe for one tableau.
#[derive(Debug, Clone, Serialize)]
pub struct ResolventProbe {
    pub taus: Vec<f64>,
    /// Power-iteration estimates of ‖(I − τ(A⊗M))⁻¹‖ in the block
    /// weighted norm.
    pub norm_estimates: Vec<f64>,
    /// Sampled ratios ‖[I − (I−τ(A⊗M))⁻¹]v‖ / (τ‖(A⊗M)v‖).
    pub ratio_estimates: Vec<f64>,
}

impl ResolventProbe {
    pub fn max_norm(&self) -> f64 {
        self.norm_estimates.iter().copied().fold(0.0, f64::max)
    }

    pub fn norm_spread(&self) -> f64 {
        let max = self.norm_estimates.iter().copied().fold(f64::MIN, f64::max);
        let min = self.norm_estimates.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }

    pub fn ratio_spread(&self) -> f64 {
        let max = self.ratio_estimates.iter().copied().fold(f64::MIN, f64::max);
        let min = self.ratio_estimates.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }
}

fn block_norm(v: &[FieldState]) -> f64 {
    v.iter().map(|u| u.energy()).sum::<f64>().sqrt()
}

fn block_scale(v: &mut [FieldState], alpha: f64) {
    for u in v.iter_mut() {
        u.scale_mut(alpha);
    }
}

/// Estimates resolvent bounds of the stage operator for a coercive
/// tableau: for each τ, ‖(I − τ(A⊗M))⁻¹‖ by power iteration on the
/// composition with its adjoint, and the perturbation-ratio bound over
/// pseudo-random stage vectors. Non-coercive tableaux are rejected.
pub fn resolvent_bound_probe(
    operator: &dyn MaxwellOperator,
    tableau: &ButcherTableau,
    taus: &[f64],
) -> Result<ResolventProbe> {
    match tableau.check_coercivity() {
        Coercivity::Coercive { .. } => {}
        other => {
            return Err(Error::DiagnosticPrecondition(format!(
                "resolvent probe requires a coercive tableau, classification was {other:?}"
            )))
        }
    }
    let s = tableau.s;
    let layout = operator.layout();
    let precond = StagePreconditioner::new(&tableau.a)?;
    // Adjoint in the block weighted inner product: (I − τ(A⊗M))* =
    // I + τ(Aᵀ⊗M) since M is skew-adjoint; realized as the
    // preconditioner of −Aᵀ.
    let precond_adj = StagePreconditioner::new(&(-tableau.a.transpose()))?;

    let seed_vec = |salt: u64| -> Vec<FieldState> {
        (0..s)
            .map(|i| {
                crate::spatial::seeded_state(layout, salt.wrapping_mul(31).wrapping_add(i as u64))
            })
            .collect()
    };

    let mut norm_estimates = Vec::with_capacity(taus.len());
    let mut ratio_estimates = Vec::with_capacity(taus.len());
    for &tau in taus {
        // Power iteration on R*R where R = (I − τ(A⊗M))⁻¹.
        let mut v = seed_vec(1);
        let mut sigma2: f64 = 0.0;
        for _ in 0..40 {
            let nv = block_norm(&v);
            block_scale(&mut v, 1.0 / nv);
            let rv = precond.solve(tau, &v, operator)?;
            let w = precond_adj.solve(tau, &rv, operator)?;
            sigma2 = w
                .iter()
                .zip(&v)
                .map(|(a, b)| a.inner_product(b).expect("same layout"))
                .sum();
            v = w;
        }
        norm_estimates.push(sigma2.max(0.0).sqrt());

        // Perturbation ratio over sampled vectors.
        let mut worst: f64 = 0.0;
        for salt in 2..7 {
            let v = seed_vec(salt);
            let rv = precond.solve(tau, &v, operator)?;
            let num: f64 = block_norm(
                &v.iter()
                    .zip(&rv)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            // (A⊗M)v.
            let mv: Vec<FieldState> = v.iter().map(|u| operator.apply(u)).collect();
            let amv: Vec<FieldState> = (0..s)
                .map(|i| {
                    let mut acc = FieldState::zeros(Arc::clone(layout));
                    for j in 0..s {
                        acc.axpy(tableau.a[(i, j)], &mv[j]);
                    }
                    acc
                })
                .collect();
            let den = tau * block_norm(&amv);
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
        ratio_estimates.push(worst);
    }
    Ok(ResolventProbe { taus: taus.to_vec(), norm_estimates, ratio_estimates })
}

/// Empirical p-th moment of ‖u^n‖_H per time; needs ≥ 30 replicas.
pub fn moment_probe(trajectories: &[Trajectory], p: f64) -> Result<DiagnosticSeries> {
    if trajectories.len() < 30 {
        return Err(Error::DiagnosticPrecondition(format!(
            "moment probe needs >= 30 replicas, got {}",
            trajectories.len()
        )));
    }
    let times = common_times(trajectories)?;
    let r = trajectories.len() as f64;
    let values: Vec<f64> = (0..times.len())
        .map(|n| {
            trajectories
                .iter()
                .map(|t| t.states[n].norm_h().powf(p))
                .sum::<f64>()
                / r
        })
        .collect();
    Ok(DiagnosticSeries { times, values, stderr: None, low_replicas: false })
}

/// Hölder-regularity probe: max_n E‖u^{n+1} − u^n‖²_H / τ, which the
/// mean-square continuity estimate predicts to be bounded uniformly
/// in τ. Needs ≥ 30 replicas and an unthinned trajectory.
pub fn holder_probe(trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.len() < 30 {
        return Err(Error::DiagnosticPrecondition(format!(
            "holder probe needs >= 30 replicas, got {}",
            trajectories.len()
        )));
    }
    let times = common_times(trajectories)?;
    if times.len() < 2 {
        return Err(Error::DiagnosticPrecondition("trajectory has no steps".into()));
    }
    let r = trajectories.len() as f64;
    let mut worst: f64 = 0.0;
    for n in 0..times.len() - 1 {
        let tau = times[n + 1] - times[n];
        let mean_sq = trajectories
            .iter()
            .map(|t| {
                let d = &t.states[n + 1] - &t.states[n];
                d.energy()
            })
            .sum::<f64>()
            / r;
        worst = worst.max(mean_sq / tau);
    }
    Ok(worst)
}

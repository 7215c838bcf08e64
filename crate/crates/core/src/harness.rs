//! Monte Carlo experiment harness: replica scheduling, strong
//! convergence studies against a fine-step self-reference, deterministic
//! order studies against the exact semigroup, and report serialization.
//!
//! Replica results are always collected by replica index, so output is
//! bitwise identical regardless of how many worker threads execute the
//! replicas.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::fit_line;
use crate::error::{Error, Result};
use crate::integrator::{integrate, integrate_with_stride, StepperConfig, Trajectory};
use crate::model::{Problem, ProblemConfig};
use crate::noise::{coarsen, sample_path, NoisePath};
use crate::tableau::ButcherTableau;

/// Runs `f` on a dedicated rayon pool with `workers` threads, or on the
/// global pool when `workers` is `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .expect("thread pool construction")
            .install(f),
        None => f(),
    }
}

/// Integrates `replicas` independent noise paths in parallel. Replica r
/// uses RNG stream r of `seed`; results are returned in replica order.
pub fn mc_run(
    problem: &Arc<Problem>,
    cfg: &StepperConfig,
    seed: u64,
    replicas: usize,
    stride: usize,
    workers: Option<usize>,
) -> Result<Vec<Trajectory>> {
    if replicas == 0 {
        return Err(Error::InvalidConfig("replicas must be >= 1".into()));
    }
    let n = steps_for(problem.horizon, cfg.tau)?;
    with_workers(workers, || {
        (0..replicas as u64)
            .into_par_iter()
            .map(|rep| {
                let path = sample_path(seed, rep, n, cfg.tau, &problem.covariance);
                integrate_with_stride(problem, cfg, &path, stride)
                    .map_err(|e| e.in_replica(rep as usize))
            })
            .collect::<Result<Vec<_>>>()
    })
}

fn steps_for(horizon: f64, tau: f64) -> Result<usize> {
    let n = horizon / tau;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-9 * rounded.max(1.0) || rounded < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "step size {tau} does not divide the horizon {horizon}"
        )));
    }
    Ok(rounded as usize)
}

/// One strong-convergence study: errors per step size, the fitted
/// log2–log2 slope, and the pass verdict against an order band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tableau: String,
    pub taus: Vec<f64>,
    /// sup-in-time root mean square errors: sqrt(max_n mean_r ‖e_n‖²_H).
    pub errors: Vec<f64>,
    /// Delta-method standard errors of `errors`.
    pub stderrs: Vec<f64>,
    /// The companion statistic sqrt(mean_r max_n ‖e_n‖²_H).
    pub mean_of_max_errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub replicas: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<(f64, f64)>,
    pub pass: bool,
}

/// Parameters of a convergence study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub problem: ProblemConfig,
    pub tableau: String,
    pub tau_levels: Vec<f64>,
    #[serde(default = "default_ref_refinement")]
    pub ref_refinement: usize,
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub band: Option<(f64, f64)>,
}

fn default_ref_refinement() -> usize {
    64
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("study config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Runs the study described by `cfg`: per replica, one fine noise path
/// at τ_ref = τ_min / ref_refinement drives both a fine midpoint
/// reference and, after coarsening, the method under study at every
/// level. Errors are measured in the ‖·‖_H norm at the level's own grid
/// times against the reference sampled at matching times.
pub fn run_study(cfg: &StudyConfig, workers: Option<usize>) -> Result<ConvergenceReport> {
    let problem = Arc::new(cfg.problem.build()?);
    let tableau = ButcherTableau::builtin(&cfg.tableau)?;
    convergence_study(
        &problem,
        &tableau,
        &cfg.tableau,
        &cfg.tau_levels,
        cfg.ref_refinement,
        cfg.replicas,
        cfg.seed,
        cfg.band,
        workers,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    problem: &Arc<Problem>,
    tableau: &ButcherTableau,
    tableau_name: &str,
    tau_levels: &[f64],
    ref_refinement: usize,
    replicas: usize,
    seed: u64,
    band: Option<(f64, f64)>,
    workers: Option<usize>,
) -> Result<ConvergenceReport> {
    if tau_levels.len() < 3 {
        return Err(Error::InvalidConfig(
            "a convergence study needs at least 3 step sizes".into(),
        ));
    }
    if replicas < 2 {
        return Err(Error::InvalidConfig(
            "a convergence study needs at least 2 replicas".into(),
        ));
    }
    if ref_refinement < 1 {
        return Err(Error::InvalidConfig("ref_refinement must be >= 1".into()));
    }
    let mut taus = tau_levels.to_vec();
    taus.sort_by(|a, b| b.partial_cmp(a).expect("finite step sizes"));
    let tau_min = *taus.last().expect("non-empty levels");
    let tau_ref = tau_min / ref_refinement as f64;

    // Every level step count, plus the ratios needed to coarsen the fine
    // path and to index the reference (which is stored on the τ_min grid).
    let n_ref = steps_for(problem.horizon, tau_ref)?;
    let mut level_ratio_ref = Vec::with_capacity(taus.len()); // τ_ℓ / τ_ref
    let mut level_ratio_min = Vec::with_capacity(taus.len()); // τ_ℓ / τ_min
    for &tau in &taus {
        let r = tau / tau_ref;
        if (r - r.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "step size {tau} is not an integer multiple of the reference step {tau_ref}"
            )));
        }
        level_ratio_ref.push(r.round() as usize);
        level_ratio_min.push((tau / tau_min).round() as usize);
        steps_for(problem.horizon, tau)?;
    }

    let ref_cfg = StepperConfig::new(ButcherTableau::builtin("midpoint")?, tau_ref)?;
    let level_cfgs: Vec<StepperConfig> = taus
        .iter()
        .map(|&tau| StepperConfig::new(tableau.clone(), tau))
        .collect::<Result<Vec<_>>>()?;

    // Per replica: for each level, the squared H-norm error at every
    // level grid time (including t = 0).
    let per_replica: Vec<Vec<Vec<f64>>> = with_workers(workers, || {
        (0..replicas as u64)
            .into_par_iter()
            .map(|rep| -> Result<Vec<Vec<f64>>> {
                let fine = sample_path(seed, rep, n_ref, tau_ref, &problem.covariance);
                let reference =
                    integrate_with_stride(problem, &ref_cfg, &fine, ref_refinement)
                        .map_err(|e| e.in_replica(rep as usize))?;
                let mut per_level = Vec::with_capacity(taus.len());
                for (lvl, cfg) in level_cfgs.iter().enumerate() {
                    let path = coarsen(&fine, level_ratio_ref[lvl])?;
                    let traj = integrate(problem, cfg, &path)
                        .map_err(|e| e.in_replica(rep as usize))?;
                    let sq: Vec<f64> = traj
                        .states
                        .iter()
                        .enumerate()
                        .map(|(n, u)| {
                            let r = &reference.states[n * level_ratio_min[lvl]];
                            (u - r).energy()
                        })
                        .collect();
                    per_level.push(sq);
                }
                Ok(per_level)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // Reduce in replica order (scheduling-invariant).
    let mut errors = Vec::with_capacity(taus.len());
    let mut stderrs = Vec::with_capacity(taus.len());
    let mut mean_of_max = Vec::with_capacity(taus.len());
    let r_f = replicas as f64;
    for lvl in 0..taus.len() {
        let n_times = per_replica[0][lvl].len();
        // Gating statistic: sup over grid times of the mean squared
        // error (max of the per-time RMS).
        let mut worst_mean = 0.0f64;
        let mut worst_idx = 0usize;
        for n in 0..n_times {
            let mean = per_replica.iter().map(|r| r[lvl][n]).sum::<f64>() / r_f;
            if mean > worst_mean {
                worst_mean = mean;
                worst_idx = n;
            }
        }
        let err = worst_mean.sqrt();
        errors.push(err);
        // Delta method: se(sqrt(x)) ≈ se(x) / (2 sqrt(x)).
        let var = per_replica
            .iter()
            .map(|r| {
                let d = r[lvl][worst_idx] - worst_mean;
                d * d
            })
            .sum::<f64>()
            / (r_f - 1.0);
        let se_mean_sq = (var / r_f).sqrt();
        stderrs.push(if err > 0.0 { se_mean_sq / (2.0 * err) } else { 0.0 });

        let mom = per_replica
            .iter()
            .map(|r| r[lvl].iter().copied().fold(0.0f64, f64::max))
            .sum::<f64>()
            / r_f;
        mean_of_max.push(mom.sqrt());
    }

    let xs: Vec<f64> = taus.iter().map(|t| t.log2()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
    let (slope, intercept) = fit_line(&xs, &ys);
    let pass = band.map_or(true, |(lo, hi)| slope >= lo && slope <= hi);
    Ok(ConvergenceReport {
        tableau: tableau_name.to_string(),
        taus,
        errors,
        stderrs,
        mean_of_max_errors: mean_of_max,
        slope,
        intercept,
        replicas,
        seed,
        band,
        pass,
    })
}

/// Deterministic (noise-free) order study against the exact semigroup:
/// integrates du/dt = Mu with the given tableau at each step size and
/// measures ‖u_N − exp(T·M)u0‖_H. Requires a backend with an exact
/// `exp_apply` and a zero drift.
pub fn deterministic_order_study(
    problem: &Arc<Problem>,
    tableau: &ButcherTableau,
    tableau_name: &str,
    tau_levels: &[f64],
) -> Result<ConvergenceReport> {
    if tau_levels.len() < 3 {
        return Err(Error::InvalidConfig(
            "an order study needs at least 3 step sizes".into(),
        ));
    }
    if !problem.drift.is_zero() {
        return Err(Error::InvalidConfig(
            "the deterministic order study requires a zero drift".into(),
        ));
    }
    let exact = problem
        .operator
        .exp_apply(problem.horizon, &problem.u0)
        .ok_or_else(|| {
            Error::InvalidConfig(
                "the deterministic order study needs a backend with an exact semigroup".into(),
            )
        })?;
    let mut taus = tau_levels.to_vec();
    taus.sort_by(|a, b| b.partial_cmp(a).expect("finite step sizes"));
    let j = problem.covariance.lambdas.len();
    let mut errors = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let n = steps_for(problem.horizon, tau)?;
        let silent = NoisePath {
            n,
            tau,
            xi: nalgebra::DMatrix::zeros(n, j),
            seed: 0,
            stream: 0,
        };
        let cfg = StepperConfig::new(tableau.clone(), tau)?;
        let traj = integrate_with_stride(problem, &cfg, &silent, n)?;
        errors.push((traj.final_state() - &exact).norm_h());
    }
    let xs: Vec<f64> = taus.iter().map(|t| t.log2()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
    let (slope, intercept) = fit_line(&xs, &ys);
    let n_levels = taus.len();
    Ok(ConvergenceReport {
        tableau: tableau_name.to_string(),
        taus,
        stderrs: vec![0.0; n_levels],
        mean_of_max_errors: errors.clone(),
        errors,
        slope,
        intercept,
        replicas: 1,
        seed: 0,
        band: None,
        pass: true,
    })
}

/// Writes `report.csv` (tau,error,stderr rows) and `summary.json` into
/// `dir`, creating the directory if needed.
pub fn write_report(dir: &Path, report: &ConvergenceReport) -> Result<()> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("report.csv"))?);
    writeln!(csv, "tau,error,stderr")?;
    for ((tau, err), se) in report.taus.iter().zip(&report.errors).zip(&report.stderrs) {
        writeln!(csv, "{tau:.17e},{err:.17e},{se:.17e}")?;
    }
    crate::io::write_json(report, &dir.join("summary.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DriftSpec;
    use crate::noise::{CovarianceSpec, NoiseProfile, Profile};
    use crate::spatial::{build_maxwell_1d, build_spectral_hamiltonian, Grid1D, MaxwellOperator};

    fn small_problem() -> Arc<Problem> {
        let op = build_maxwell_1d(Grid1D::uniform(12, 1.0, 1.0, 1.0).unwrap());
        let u0 = crate::spatial::seeded_state(op.layout(), 1);
        Arc::new(
            Problem::new(
                op,
                DriftSpec::LinearDamping { sigma_e: 0.4, sigma_m: 0.4 },
                CovarianceSpec::default_smooth(4, 1.0).unwrap(),
                NoiseProfile {
                    je_r: Profile::Constant { amplitude: 0.8 },
                    jm_r: Profile::Zero,
                },
                u0,
                0.5,
            )
            .unwrap(),
        )
    }

    #[test]
    fn mc_run_is_reproducible_and_ordered() {
        let p = small_problem();
        let cfg = StepperConfig::new(ButcherTableau::builtin("midpoint").unwrap(), 0.05).unwrap();
        let a = mc_run(&p, &cfg, 11, 6, 1, Some(1)).unwrap();
        let b = mc_run(&p, &cfg, 11, 6, 1, Some(4)).unwrap();
        assert_eq!(a.len(), 6);
        for (ta, tb) in a.iter().zip(&b) {
            for (ua, ub) in ta.states.iter().zip(&tb.states) {
                assert_eq!(ua.data, ub.data, "worker count changed the result bitwise");
            }
        }
        // Distinct replicas see distinct noise.
        assert_ne!(a[0].final_state().data, a[1].final_state().data);
    }

    #[test]
    fn convergence_study_errors_shrink_with_tau() {
        let p = small_problem();
        let tab = ButcherTableau::builtin("implicit_euler").unwrap();
        // Steps small enough that τ‖M‖ < 1 on this grid, otherwise the
        // coarse levels sit in the preasymptotic regime.
        let report = convergence_study(
            &p,
            &tab,
            "implicit_euler",
            &[1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
            8,
            8,
            3,
            Some((0.5, 1.5)),
            None,
        )
        .unwrap();
        assert!(report.errors[0] > report.errors[1]);
        assert!(report.errors[1] > report.errors[2]);
        assert!(report.slope > 0.5, "slope {}", report.slope);
        assert!(report.errors.iter().zip(&report.mean_of_max_errors).all(|(e, m)| e <= m));
    }

    #[test]
    fn convergence_study_worker_invariance() {
        let p = small_problem();
        let tab = ButcherTableau::builtin("midpoint").unwrap();
        let run = |w| {
            convergence_study(
                &p, &tab, "midpoint", &[0.125, 0.0625, 0.03125], 4, 4, 7, None, Some(w),
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.slope, b.slope);
    }

    #[test]
    fn self_reference_collapses_at_unit_refinement() {
        // With ref_refinement = 1 and the midpoint method under study,
        // the finest level re-runs the reference integration exactly.
        let p = small_problem();
        let tab = ButcherTableau::builtin("midpoint").unwrap();
        let report = convergence_study(
            &p, &tab, "midpoint", &[0.125, 0.0625, 0.03125], 1, 3, 5, None, None,
        )
        .unwrap();
        assert!(
            report.errors[2] <= 1e-13,
            "finest-level error should collapse, got {}",
            report.errors[2]
        );
    }

    #[test]
    fn deterministic_study_recovers_midpoint_order_two() {
        let op = build_spectral_hamiltonian(4, 1.0, 1.0, 1.0).unwrap();
        let u0 = crate::spatial::seeded_state(op.layout(), 2);
        let p = Arc::new(
            Problem::new(
                op,
                DriftSpec::Zero,
                CovarianceSpec::new(vec![1.0], crate::noise::ModeFamily::SpectralCoeff).unwrap(),
                NoiseProfile::zero(),
                u0,
                1.0,
            )
            .unwrap(),
        );
        let tab = ButcherTableau::builtin("midpoint").unwrap();
        let report = deterministic_order_study(
            &p,
            &tab,
            "midpoint",
            &[1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
        )
        .unwrap();
        assert!((report.slope - 2.0).abs() < 0.1, "slope {}", report.slope);
    }

    #[test]
    fn report_roundtrips_and_csv_matches() {
        let p = small_problem();
        let tab = ButcherTableau::builtin("implicit_euler").unwrap();
        let report = convergence_study(
            &p,
            &tab,
            "implicit_euler",
            &[0.125, 0.0625, 0.03125],
            4,
            3,
            1,
            Some((0.0, 5.0)),
            None,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("srkm-harness-{}", std::process::id()));
        write_report(&dir, &report).unwrap();

        let text = std::fs::read_to_string(dir.join("report.csv")).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 1 + report.taus.len());
        assert_eq!(rows[0], "tau,error,stderr");
        // Recompute the slope from the CSV values.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for row in &rows[1..] {
            let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
            xs.push(cells[0].log2());
            ys.push(cells[1].log2());
        }
        let (slope, _) = fit_line(&xs, &ys);
        assert!((slope - report.slope).abs() < 1e-12);

        let json = std::fs::read_to_string(dir.join("summary.json")).unwrap();
        let back: ConvergenceReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.taus, report.taus);
        assert_eq!(back.pass, report.pass);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn study_config_parses_with_defaults() {
        let text = r#"{
            "problem": {
                "backend": {"kind": "grid1d", "m": 8, "length": 1.0, "eps": 1.0, "mu": 1.0},
                "drift": {"kind": "zero"},
                "covariance": {"j": 3},
                "profile": {"je_r": {"kind": "constant", "amplitude": 1.0}, "jm_r": {"kind": "zero"}},
                "u0": "single_mode",
                "horizon": 1.0
            },
            "tableau": "midpoint",
            "tau_levels": [0.25, 0.125, 0.0625],
            "replicas": 4
        }"#;
        let cfg = StudyConfig::from_json(text).unwrap();
        assert_eq!(cfg.ref_refinement, 64);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.band.is_none());
        cfg.problem.build().unwrap();
    }

    #[test]
    fn rejects_bad_study_parameters() {
        let p = small_problem();
        let tab = ButcherTableau::builtin("midpoint").unwrap();
        // Too few levels.
        assert!(convergence_study(&p, &tab, "midpoint", &[0.1, 0.05], 4, 4, 0, None, None).is_err());
        // Step size not dividing the horizon.
        assert!(
            convergence_study(&p, &tab, "midpoint", &[0.3, 0.15, 0.075], 4, 4, 0, None, None)
                .is_err()
        );
        // Too few replicas.
        assert!(
            convergence_study(&p, &tab, "midpoint", &[0.125, 0.0625, 0.03125], 4, 1, 0, None, None)
                .is_err()
        );
    }
}

//! Command-line front door: tableau analysis, single runs, diagnostic
//! batteries, and convergence studies driven by JSON config files.
//!
//! Exit codes: 0 success, 1 an acceptance band failed, 2 usage or
//! configuration error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use srkm::diagnostics::{
    energy_law_residual, resolvent_bound_probe, symplectic_residual, DiagnosticSummary,
};
use srkm::harness::{mc_run, run_study, with_workers, StudyConfig};
use srkm::integrator::{Stepper, StepperConfig, TangentFrame};
use srkm::model::ProblemConfig;
use srkm::tableau::{ButcherTableau, Coercivity};
use srkm::Error;

#[derive(Parser)]
#[command(name = "srkm", version, about = "Structure-preserving stochastic Runge-Kutta toolkit for semilinear Maxwell systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the replica count from the config.
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Emit machine-readable JSON to stdout instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Classifies a tableau: stability matrix, algebraic stability,
    /// symplecticity, coercivity and weight consistency.
    Tableau {
        /// Builtin name (implicit_euler, midpoint, explicit_euler,
        /// gauss2) or a path to a tableau JSON file.
        name_or_file: String,
        #[arg(long)]
        json: bool,
    },
    /// Integrates the configured problem over Monte Carlo replicas and
    /// writes trajectory artifacts.
    Run(CommonOpts),
    /// Runs the diagnostic battery appropriate to the configured
    /// problem (energy law, divergence, symplecticity, resolvent).
    Diagnose(CommonOpts),
    /// Runs a strong-convergence study and reports the fitted order.
    Converge(CommonOpts),
}

/// Config for `run` and `diagnose`: a problem plus one stepper.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    problem: ProblemConfig,
    tableau: String,
    tau: f64,
    #[serde(default = "one")]
    replicas: usize,
    #[serde(default)]
    seed: u64,
}

fn one() -> usize {
    1
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("run config: {e}")))
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::FixedPointDivergence { .. } | Error::StageSolveFailure(_) => 3,
        Error::StepFailed { source, .. } | Error::ReplicaFailed { source, .. } => {
            exit_code_for(source)
        }
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Tableau { name_or_file, json } => cmd_tableau(&name_or_file, json),
        Command::Run(opts) => cmd_run(&opts),
        Command::Diagnose(opts) => cmd_diagnose(&opts),
        Command::Converge(opts) => cmd_converge(&opts),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_tableau(name_or_file: &str, json: bool) -> Result<u8, Error> {
    let tableau = if Path::new(name_or_file).exists() {
        let text = std::fs::read_to_string(name_or_file)?;
        serde_json::from_str::<ButcherTableau>(&text)
            .map_err(|e| Error::InvalidTableau(format!("{name_or_file}: {e}")))?
    } else {
        ButcherTableau::builtin(name_or_file)?
    };
    let report = tableau.report();
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("stages:               {}", report.stage_count);
        println!("stability matrix:     {:?}", report.stability_matrix);
        println!("algebraically stable: {}", report.algebraically_stable);
        println!("symplectic:           {}", report.symplectic);
        match report.coercivity {
            Coercivity::Coercive { k, alpha } => {
                println!("coercive:             true (alpha = {alpha:.6}, K = {k:?})")
            }
            Coercivity::SingularA => println!("coercive:             singular_A"),
            Coercivity::Unknown => println!("coercive:             unknown"),
        }
        println!("consistent weights:   {}", report.consistent_weights);
    }
    Ok(0)
}

fn cmd_run(opts: &CommonOpts) -> Result<u8, Error> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(replicas) = opts.replicas {
        cfg.replicas = replicas;
    }
    let problem = Arc::new(cfg.problem.build()?);
    let tableau = ButcherTableau::builtin(&cfg.tableau)?;
    let stepper_cfg = StepperConfig::new(tableau, cfg.tau)?;
    let trajectories = mc_run(
        &problem,
        &stepper_cfg,
        cfg.seed,
        cfg.replicas,
        1,
        opts.workers,
    )?;

    std::fs::create_dir_all(&opts.out)?;
    // Plot-ready energy trace of the first replica, final-state
    // snapshot, and a summary across replicas.
    srkm::io::write_trajectory_csv(
        &trajectories[0].times,
        &trajectories[0].states,
        &opts.out.join("report.csv"),
    )?;
    srkm::io::write_state_csv(
        trajectories[0].final_state(),
        &opts.out.join("final_state.csv"),
    )?;
    let final_energies: Vec<f64> = trajectories
        .iter()
        .map(|t| t.final_state().energy())
        .collect();
    let mean_energy = final_energies.iter().sum::<f64>() / final_energies.len() as f64;
    let summary = serde_json::json!({
        "command": "run",
        "tableau": cfg.tableau,
        "tau": cfg.tau,
        "replicas": cfg.replicas,
        "seed": cfg.seed,
        "steps": trajectories[0].times.len() - 1,
        "mean_final_energy": mean_energy,
        "final_energies": final_energies,
    });
    srkm::io::write_json(&summary, &opts.out.join("summary.json"))?;
    if opts.json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    } else {
        println!(
            "run complete: {} replicas × {} steps, mean final energy {mean_energy:.6e}",
            cfg.replicas,
            trajectories[0].times.len() - 1
        );
    }
    Ok(0)
}

fn cmd_diagnose(opts: &CommonOpts) -> Result<u8, Error> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(replicas) = opts.replicas {
        cfg.replicas = replicas;
    }
    let problem = Arc::new(cfg.problem.build()?);
    let tableau = ButcherTableau::builtin(&cfg.tableau)?;
    let stepper_cfg = StepperConfig::new(tableau.clone(), cfg.tau)?;
    let mut summaries: Vec<DiagnosticSummary> = Vec::new();

    // Energy trace law, judged against Monte Carlo error (or a strict
    // deterministic tolerance when the problem is noise-free).
    let trajectories = mc_run(
        &problem,
        &stepper_cfg,
        cfg.seed,
        cfg.replicas,
        1,
        opts.workers,
    )?;
    let series = energy_law_residual(&trajectories, &problem)?;
    let scale = problem.u0.energy().max(1.0);
    let tol = if problem.profile.is_zero() || problem.hs_norm_sq(0.0) == 0.0 {
        // Deterministic law: quadrature error of the drift term only.
        if problem.drift.is_zero() { 1e-10 * scale } else { 10.0 * cfg.tau * scale }
    } else {
        let worst_se = series
            .stderr
            .iter()
            .flatten()
            .copied()
            .fold(0.0f64, f64::max);
        (3.0 * worst_se).max(1e-10 * scale)
    };
    summaries.push(DiagnosticSummary::judge("energy_law_residual", series.worst(), tol));

    // Divergence conservation where the backend defines a divergence.
    if let Ok(div) = srkm::diagnostics::divergence_drift(&trajectories[0], &problem) {
        let field_scale = trajectories[0]
            .states
            .iter()
            .map(|u| u.data.amax())
            .fold(1.0f64, f64::max);
        summaries.push(DiagnosticSummary::judge(
            "divergence_drift",
            div.worst(),
            1e-12 * field_scale,
        ));
    }

    // Symplectic 2-form preservation for symplectic tableaux on the
    // canonical (spectral) backend with a Hamiltonian drift.
    if tableau.is_symplectic(1e-12) && problem.layout().backend == "spectral" {
        let steps = (trajectories[0].times.len() - 1).min(100);
        let mut stepper = Stepper::new(Arc::clone(&problem), stepper_cfg.clone())?;
        let mut frame = TangentFrame::identity(problem.layout());
        let mut u = problem.u0.clone();
        let xi = srkm::nalgebra::DVector::zeros(problem.covariance.lambdas.len());
        for n in 0..steps {
            u = stepper.step(n as f64 * cfg.tau, &u, &xi)?;
            stepper.propagate_tangent(&mut frame)?;
        }
        if let Ok(residual) = symplectic_residual(&frame, &problem, 1.0) {
            summaries.push(DiagnosticSummary::judge("symplectic_residual", residual, 1e-8));
        }
    }

    // Resolvent bounds for coercive tableaux.
    if matches!(tableau.check_coercivity(), Coercivity::Coercive { .. }) {
        let probe = with_workers(opts.workers, || {
            resolvent_bound_probe(
                problem.operator.as_ref(),
                &tableau,
                &[cfg.tau * 0.1, cfg.tau, cfg.tau * 10.0],
            )
        })?;
        summaries.push(DiagnosticSummary::judge(
            "resolvent_norm",
            probe.max_norm(),
            1.0 + 1e-6,
        ));
    }

    std::fs::create_dir_all(&opts.out)?;
    let all_pass = summaries.iter().all(|s| s.passed());
    let report = serde_json::json!({
        "command": "diagnose",
        "tableau": cfg.tableau,
        "tau": cfg.tau,
        "replicas": cfg.replicas,
        "seed": cfg.seed,
        "diagnostics": summaries,
        "pass": all_pass,
    });
    srkm::io::write_json(&report, &opts.out.join("summary.json"))?;
    series.write_csv(&opts.out.join("report.csv"))?;
    if opts.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for s in &summaries {
            println!(
                "{}: {} (worst {:.3e}, tolerance {:.3e})",
                s.verdict, s.name, s.worst_value, s.tolerance
            );
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_converge(opts: &CommonOpts) -> Result<u8, Error> {
    let mut cfg = StudyConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(replicas) = opts.replicas {
        cfg.replicas = replicas;
    }
    let report = run_study(&cfg, opts.workers)?;
    srkm::harness::write_report(&opts.out, &report)?;
    if opts.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!(
            "convergence study ({}, {} replicas): slope {:.4}, errors {:?}",
            report.tableau, report.replicas, report.slope, report.errors
        );
        match report.band {
            Some((lo, hi)) => println!(
                "{}: slope within [{lo}, {hi}]",
                if report.pass { "PASS" } else { "FAIL" }
            ),
            None => println!("no order band configured; reporting only"),
        }
    }
    Ok(if report.pass { 0 } else { 1 })
}

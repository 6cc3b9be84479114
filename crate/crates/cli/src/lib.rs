//! `peiv` command-line front end.
//!
//! The `cmd_*` functions are the subcommands; `main.rs` only parses arguments
//! and maps errors to exit codes.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod io;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use peiv_core::{estimate, loglik, run_mc, simulate, DVector, Method};
use serde::Serialize;

pub use config::ExperimentConfig;

/// Exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use peiv_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numerical(_)
                | E::IllPosed(_)
                | E::Divergence(_)
                | E::Unidentifiable(_)
                | E::NonStationary(_)
                | E::NotPositiveSemidefinite(_) => 3,
                E::Dimension(_) | E::Config(_) | E::Empty => 2,
            };
        }
    }
    2
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .context("cannot start worker threads")?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn xhat_path(out: &Path) -> PathBuf {
    out.with_extension("xhat.csv")
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    seed: u64,
    steps: usize,
    config: &'a ExperimentConfig,
}

/// Simulates the configured model and writes the trajectory CSV plus a
/// `<out>.meta.json` record of the resolved config.
pub fn cmd_simulate(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    let model = cfg.model()?;
    let x0 = cfg.initial_state_density(&model)?;
    let sim = cfg
        .simulate
        .as_mut()
        .context("a [simulate] section is required")?;
    if let Some(s) = seed {
        sim.seed = s;
    }
    let sim = sim.clone();
    let traj = simulate(
        &model,
        &DVector::from_vec(sim.theta_true.clone()),
        &x0,
        sim.steps,
        sim.seed,
    )?;
    io::write_trajectory(out, &traj)?;
    io::write_json(
        &sidecar_path(out),
        &SimulateMeta {
            seed: sim.seed,
            steps: sim.steps,
            config: &cfg,
        },
    )
}

#[derive(Debug, Serialize)]
pub struct EstimateOutput {
    pub method: String,
    pub theta_hat: Vec<f64>,
    pub theta_cov: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub objective_trace: Vec<f64>,
    pub xhat_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_initial: Option<Vec<f64>>,
    pub data: String,
    pub config: ExperimentConfig,
}

/// Runs one estimator on a trajectory file. Writes the JSON summary to `out`
/// and the smoothed states next to it (see [`xhat_path`]).
pub fn cmd_estimate(config_path: &Path, method: Method, data: &Path, out: &Path) -> Result<EstimateOutput> {
    let cfg = ExperimentConfig::load(config_path)?;
    let model = cfg.model()?;
    let y = io::read_measurements(data, model.m())?;
    let prior = cfg.state_prior(&model, &y)?;
    let theta_prior = cfg.theta_prior(model.d())?;
    let est = estimate(
        method,
        &model,
        &y,
        &prior,
        &theta_prior,
        &cfg.iter_config()?,
        &cfg.aseks_config(),
    )?;
    let ll = loglik(&model, &est.theta_hat, &y, &prior)?;
    let xpath = xhat_path(out);
    io::write_states(&xpath, &est.xhat, &est.state_cov.marginals)?;
    let result = EstimateOutput {
        method: method.as_str().to_string(),
        theta_hat: est.theta_hat.iter().copied().collect(),
        theta_cov: config::matrix_spec(&est.theta_cov),
        iterations: est.iterations,
        converged: est.converged,
        loglik: ll,
        objective_trace: est.objective_trace.clone(),
        xhat_path: xpath.display().to_string(),
        theta_initial: est.theta_initial.map(|t| t.iter().copied().collect()),
        data: data.display().to_string(),
        config: cfg,
    };
    io::write_json(out, &result)?;
    Ok(result)
}

#[derive(Serialize)]
struct BenchmarkMeta<'a> {
    seed: u64,
    sigma_theta: &'a config::MatrixSpec,
    replications: usize,
    config: &'a ExperimentConfig,
}

/// Monte Carlo comparison. Writes `rmse.csv`, `ellipse.csv` and `meta.json`
/// into `out_dir` and returns their paths.
pub fn cmd_benchmark(config_path: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.resolve_benchmark()?;
    let out_dir = match (out_dir, &cfg.output_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => bail!("no output directory: pass --out-dir or set output_dir"),
    };
    let mc = cfg.mc_config()?;
    let report = run_mc(&mc)?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let rmse = out_dir.join("rmse.csv");
    let ellipse = out_dir.join("ellipse.csv");
    let meta = out_dir.join("meta.json");
    io::write_rmse(&rmse, &report)?;
    io::write_ellipses(&ellipse, &report)?;
    let b = cfg.benchmark.as_ref().expect("resolved above");
    io::write_json(
        &meta,
        &BenchmarkMeta {
            seed: b.seed,
            sigma_theta: &b.sigma_theta,
            replications: b.replications,
            config: &cfg,
        },
    )?;
    Ok(vec![rmse, ellipse, meta])
}

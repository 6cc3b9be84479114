//! Seeded Monte Carlo comparison of the joint estimators.
//!
//! Every replication is a pure function of `(master seed, batch size,
//! replication index)`, so results do not depend on how rayon schedules the
//! work. Aggregation runs over replications in index order.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{estimate, AseksConfig, IterConfig, Method};
use crate::linalg;
use crate::model::{simulate, standard_normal, stationary_cov, GaussianDensity, ParamAffineModel};

/// How the state prior handed to the estimators is formed in each
/// replication.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePrior {
    /// `x̂₀ ~ N(H(θ°)⁺ y, cov_scale · P)` with `P` the stationary covariance.
    /// With `reuse_first` the measurement `y` is `y₁`, which also stays in the
    /// data; otherwise `y` is an extra independent measurement of `x₀`.
    FromMeasurement { cov_scale: f64, reuse_first: bool },
    Fixed(GaussianDensity),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub model: ParamAffineModel,
    pub theta_true: DVector<f64>,
    pub batch_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    /// Spread of the drawn parameter prior mean `θ̂¹ ~ N(θ°, Σ_θ)`; also the
    /// prior covariance handed to PEIV and ASEKS.
    pub sigma_theta: DMatrix<f64>,
    pub methods: Vec<Method>,
    pub iter: IterConfig,
    pub aseks: AseksConfig,
    pub state_prior: StatePrior,
    /// Batch size whose `(x̃₀, θ̃)` errors are summarized as ellipses.
    pub ellipse_batch: Option<usize>,
    pub confidence: f64,
}

impl McConfig {
    /// The scalar benchmark: `x_{k+1} = 0.9 x_k + v_k`, `y_k = x_k + e_k`,
    /// `Q = 0.2`, `R = 0.09`, `Σ_θ = 0.04`, batch sizes 10..200.
    pub fn scalar_benchmark() -> Self {
        Self {
            model: ParamAffineModel::scalar_ar1(0.2, 0.09).expect("valid scalar model"),
            theta_true: DVector::from_element(1, 0.9),
            batch_sizes: vec![10, 15, 20, 25, 30, 35, 40, 45, 50, 100, 150, 200],
            replications: 1000,
            seed: 2024,
            sigma_theta: DMatrix::from_element(1, 1, 0.04),
            methods: Method::ALL.to_vec(),
            iter: IterConfig::default(),
            aseks: AseksConfig::default(),
            state_prior: StatePrior::FromMeasurement {
                cov_scale: 2.0,
                reuse_first: true,
            },
            ellipse_batch: Some(30),
            confidence: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model.d();
        if self.replications < 2 {
            return Err(Error::Config("at least 2 replications are required".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Config("batch sizes must be non-empty and >= 2".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.theta_true.len() != d {
            return Err(Error::dim("theta_true does not match d"));
        }
        if self.sigma_theta.shape() != (d, d) || !linalg::is_psd(&self.sigma_theta) {
            return Err(Error::Config("sigma_theta must be a d x d PSD matrix".into()));
        }
        if let Some(nb) = self.ellipse_batch {
            if !self.batch_sizes.contains(&nb) {
                return Err(Error::Config(format!("ellipse batch {nb} is not in batch_sizes")));
            }
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("confidence must be in (0, 1)".into()));
        }
        match &self.state_prior {
            StatePrior::FromMeasurement { cov_scale, .. } if !(*cov_scale > 0.0) => {
                return Err(Error::Config("state prior scale must be positive".into()))
            }
            StatePrior::Fixed(g) if g.dim() != self.model.n() => {
                return Err(Error::dim("fixed state prior does not match n"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Summary of one method at one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub method: Method,
    pub steps: usize,
    pub m_effective: usize,
    pub failures: usize,
    /// `sqrt(mean ‖θ̂ - θ°‖²)`.
    pub rmse_theta: f64,
    /// `sqrt(mean ‖x̂₀ - x₀°‖²)`.
    pub rmse_x0: f64,
    /// 5% and 95% quantiles of the first parameter component.
    pub q05: f64,
    pub q95: f64,
    /// Mean and population variance of the first parameter error component.
    pub bias_theta: f64,
    pub var_theta: f64,
    /// Mean of the reported variance of the first parameter component.
    pub mean_reported_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub rows: Vec<McRow>,
    pub ellipse_batch: Option<usize>,
    pub ellipses: Vec<(Method, ErrorEllipse)>,
}

impl McReport {
    pub fn row(&self, method: Method, steps: usize) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.steps == steps)
    }

    pub fn ellipse(&self, method: Method) -> Option<&ErrorEllipse> {
        self.ellipses
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, e)| e)
    }
}

/// `(x̃₀, θ̃)` ellipse: the sample mean marks the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEllipse {
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// `{z : (z - c)ᵀ cov⁻¹ (z - c) <= radius_scale}`.
    pub radius_scale: f64,
    /// The sample covariance is (numerically) singular.
    pub degenerate: bool,
}

impl ErrorEllipse {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius_scale * self.cov.determinant().max(0.0).sqrt()
    }

    pub fn contains(&self, z: &Vector2<f64>) -> bool {
        match self.cov.try_inverse() {
            Some(inv) => {
                let dz = z - self.center;
                dz.dot(&(inv * dz)) <= self.radius_scale
            }
            None => false,
        }
    }
}

/// Chi-square inverse CDF with two degrees of freedom.
pub fn chi2_2dof_quantile(p: f64) -> f64 {
    -2.0 * (-p).ln_1p()
}

pub fn error_ellipse(samples: &[[f64; 2]], confidence: f64) -> Result<ErrorEllipse> {
    if samples.len() < 3 {
        return Err(Error::Config("an error ellipse needs at least 3 samples".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config("confidence must be in (0, 1)".into()));
    }
    let n = samples.len() as f64;
    let mut center = Vector2::zeros();
    for s in samples {
        center += Vector2::new(s[0], s[1]);
    }
    center /= n;
    let mut cov = Matrix2::zeros();
    for s in samples {
        let dz = Vector2::new(s[0], s[1]) - center;
        cov += dz * dz.transpose();
    }
    cov /= n - 1.0;
    let scale = cov.trace();
    let degenerate = scale == 0.0 || cov.determinant() <= 1e-12 * scale * scale;
    Ok(ErrorEllipse {
        center,
        cov,
        radius_scale: chi2_2dof_quantile(confidence),
        degenerate,
    })
}

/// Linear-interpolation sample quantiles (`h = (n - 1) p`).
pub fn quantiles(samples: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    probs
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("quantile probability {p} outside [0, 1]")));
            }
            let h = (sorted.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        })
        .collect()
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replication `rep` at batch size `steps`.
pub fn replication_seed(master: u64, steps: usize, rep: usize) -> u64 {
    mix(mix(mix(master) ^ steps as u64) ^ rep as u64)
}

#[derive(Debug, Clone)]
struct MethodOutcome {
    theta_err: DVector<f64>,
    theta_hat0: f64,
    x0_err: DVector<f64>,
    reported_var: f64,
}

struct Replication {
    outcomes: Vec<Option<MethodOutcome>>,
}

struct Context<'a> {
    cfg: &'a McConfig,
    p_stat: DMatrix<f64>,
    h_pinv: DMatrix<f64>,
    sigma_theta_sqrt: DMatrix<f64>,
    r_sqrt: DMatrix<f64>,
    theta_cov: DMatrix<f64>,
}

fn run_replication(ctx: &Context<'_>, steps: usize, rep: usize) -> Result<Replication> {
    let cfg = ctx.cfg;
    let n = cfg.model.n();
    let seed = replication_seed(cfg.seed, steps, rep);
    let x0_true = GaussianDensity::new(DVector::zeros(n), ctx.p_stat.clone())?;
    let traj = simulate(&cfg.model, &cfg.theta_true, &x0_true, steps, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let theta_center =
        &cfg.theta_true + &ctx.sigma_theta_sqrt * standard_normal(&mut rng, cfg.model.d());
    let theta_prior = GaussianDensity {
        mean: theta_center,
        cov: ctx.theta_cov.clone(),
    };
    let state_prior = match &cfg.state_prior {
        StatePrior::FromMeasurement {
            cov_scale,
            reuse_first,
        } => {
            let y = if *reuse_first {
                traj.measurements.column(0).clone_owned()
            } else {
                let h = cfg.model.eval_h(&cfg.theta_true)?;
                &h * traj.states.column(0) + &ctx.r_sqrt * standard_normal(&mut rng, cfg.model.m())
            };
            GaussianDensity {
                mean: &ctx.h_pinv * y,
                cov: &ctx.p_stat * *cov_scale,
            }
        }
        StatePrior::Fixed(g) => g.clone(),
    };
    let x0 = traj.states.column(0).clone_owned();

    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let est = estimate(
                method,
                &cfg.model,
                &traj.measurements,
                &state_prior,
                &theta_prior,
                &cfg.iter,
                &cfg.aseks,
            )
            .ok()?;
            let theta_err = &est.theta_hat - &cfg.theta_true;
            let x0_err = est.xhat.column(0) - &x0;
            if !linalg::all_finite(&theta_err) || !linalg::all_finite(&x0_err) {
                return None;
            }
            Some(MethodOutcome {
                theta_hat0: est.theta_hat.get(0).copied().unwrap_or(f64::NAN),
                reported_var: est.theta_cov.get((0, 0)).copied().unwrap_or(f64::NAN),
                theta_err,
                x0_err,
            })
        })
        .collect();
    Ok(Replication { outcomes })
}

fn summarize(method: Method, steps: usize, outcomes: &[&MethodOutcome], failures: usize) -> McRow {
    let m = outcomes.len();
    let mf = m as f64;
    let mean = |f: &dyn Fn(&MethodOutcome) -> f64| outcomes.iter().map(|o| f(o)).sum::<f64>() / mf;
    let first = |o: &MethodOutcome| o.theta_err.get(0).copied().unwrap_or(f64::NAN);
    let (rmse_theta, rmse_x0, bias, var, reported) = if m == 0 {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let bias = mean(&first);
        (
            mean(&|o| o.theta_err.norm_squared()).sqrt(),
            mean(&|o| o.x0_err.norm_squared()).sqrt(),
            bias,
            mean(&|o| (first(o) - bias).powi(2)),
            mean(&|o| o.reported_var),
        )
    };
    let hats: Vec<f64> = outcomes.iter().map(|o| o.theta_hat0).collect();
    let (q05, q95) = match quantiles(&hats, &[0.05, 0.95]) {
        Ok(q) => (q[0], q[1]),
        Err(_) => (f64::NAN, f64::NAN),
    };
    McRow {
        method,
        steps,
        m_effective: m,
        failures,
        rmse_theta,
        rmse_x0,
        q05,
        q95,
        bias_theta: bias,
        var_theta: var,
        mean_reported_var: reported,
    }
}

/// Runs all replications on the current rayon pool.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let model = &cfg.model;
    let p_stat = stationary_cov(model, &cfg.theta_true)?;
    let h_true = model.eval_h(&cfg.theta_true)?;
    let ctx = Context {
        cfg,
        h_pinv: h_true
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numerical(e.to_string()))?,
        p_stat,
        sigma_theta_sqrt: linalg::psd_sqrt(&cfg.sigma_theta),
        r_sqrt: linalg::psd_sqrt(model.r()),
        theta_cov: cfg.sigma_theta.clone(),
    };

    let jobs: Vec<(usize, usize)> = cfg
        .batch_sizes
        .iter()
        .flat_map(|&steps| (0..cfg.replications).map(move |rep| (steps, rep)))
        .collect();
    let results: Vec<Replication> = jobs
        .par_iter()
        .map(|&(steps, rep)| run_replication(&ctx, steps, rep))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut ellipses = Vec::new();
    for (bi, &steps) in cfg.batch_sizes.iter().enumerate() {
        let group = &results[bi * cfg.replications..(bi + 1) * cfg.replications];
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let ok: Vec<&MethodOutcome> =
                group.iter().filter_map(|r| r.outcomes[mi].as_ref()).collect();
            let failures = group.len() - ok.len();
            rows.push(summarize(method, steps, &ok, failures));
            if cfg.ellipse_batch == Some(steps) {
                let samples: Vec<[f64; 2]> = ok
                    .iter()
                    .map(|o| {
                        [
                            o.x0_err[0],
                            o.theta_err.get(0).copied().unwrap_or(0.0),
                        ]
                    })
                    .collect();
                if let Ok(e) = error_ellipse(&samples, cfg.confidence) {
                    ellipses.push((method, e));
                }
            }
        }
    }
    Ok(McReport {
        rows,
        ellipse_batch: cfg.ellipse_batch,
        ellipses,
    })
}

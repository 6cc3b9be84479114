//! Experiment configuration file.
//!
//! TOML (or JSON, e.g. a previous run's `meta.json`). Matrices are row-major
//! nested arrays. Unknown keys are rejected.
//!
//! ```toml
//! [model]
//! f = [[[0.0]], [[1.0]]]   # F_0, F_1, ...
//! h = [[[1.0]], [[0.0]]]   # H_0, H_1, ...
//! q = [[0.2]]
//! r = [[0.09]]
//!
//! [prior]
//! kind = "first_measurement"
//! cov_scale = 2.0
//!
//! [theta_prior]
//! mean = [0.9]
//! cov = [[0.04]]
//!
//! [simulate]
//! theta_true = [0.9]
//! steps = 30
//!
//! [benchmark]
//! batch_sizes = [10, 20, 30]
//! replications = 1000
//! sigma_theta = [[0.04]]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use peiv_core::{
    stationary_cov, AseksConfig, DMatrix, DVector, GaussianDensity, IterConfig, McConfig, Method,
    ParamAffineModel, StatePrior,
};
use serde::{Deserialize, Serialize};

pub type MatrixSpec = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<StatePriorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_prior: Option<GaussianSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSpec>,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// `F_0..F_d`.
    pub f: Vec<MatrixSpec>,
    /// `H_0..H_d`.
    pub h: Vec<MatrixSpec>,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StatePriorSpec {
    Fixed {
        mean: Vec<f64>,
        cov: MatrixSpec,
    },
    /// `x̂₀ ~ N(H⁺ y, cov_scale · P)` with `P` the stationary covariance at
    /// `reference_theta`.
    FirstMeasurement {
        #[serde(default = "default_cov_scale")]
        cov_scale: f64,
        #[serde(default = "default_true")]
        reuse_first: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference_theta: Option<Vec<f64>>,
    },
}

fn default_cov_scale() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub theta_true: Vec<f64>,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial-state density; the stationary `N(0, P)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<GaussianSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<Vec<f64>>,
    #[serde(default)]
    pub aseks_param_walk_var: f64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            max_iter: default_max_iter(),
            tol: default_tol(),
            theta_init: None,
            aseks_param_walk_var: 0.0,
        }
    }
}

fn default_max_iter() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Falls back to `simulate.theta_true`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub sigma_theta: MatrixSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Defaults to 30 when in the grid, otherwise the first batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipse_batch: Option<usize>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_replications() -> usize {
    1000
}

fn default_seed() -> u64 {
    2024
}

fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.as_str().to_string()).collect()
}

fn default_confidence() -> f64 {
    0.95
}

/// `meta.json` wraps the resolved config.
#[derive(Deserialize)]
struct MetaWrapper {
    config: ExperimentConfig,
}

pub fn matrix(spec: &MatrixSpec, what: &str) -> Result<DMatrix<f64>> {
    let rows = spec.len();
    let cols = spec.first().map_or(0, Vec::len);
    if spec.iter().any(|r| r.len() != cols) {
        bail!("{what}: rows have different lengths");
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| spec[i][j]))
}

pub fn matrix_spec(m: &DMatrix<f64>) -> MatrixSpec {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn gaussian(spec: &GaussianSpec, what: &str) -> Result<GaussianDensity> {
    GaussianDensity::new(DVector::from_vec(spec.mean.clone()), matrix(&spec.cov, what)?)
        .with_context(|| format!("invalid {what}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("cannot parse {}", path.display()))?;
            if value.get("config").is_some() {
                serde_json::from_value::<MetaWrapper>(value)?.config
            } else {
                serde_json::from_value(value)?
            }
        } else {
            toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema checks that do not need any computation.
    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        let d = model.d();
        if let Some(tp) = &self.theta_prior {
            if tp.mean.len() != d {
                bail!("theta_prior.mean has length {}, model has d = {d}", tp.mean.len());
            }
            gaussian(tp, "theta_prior")?;
        }
        if let Some(sim) = &self.simulate {
            if sim.theta_true.len() != d {
                bail!("simulate.theta_true has length {}, model has d = {d}", sim.theta_true.len());
            }
            if sim.steps == 0 {
                bail!("simulate.steps must be at least 1");
            }
        }
        if let Some(t) = &self.estimator.theta_init {
            if t.len() != d {
                bail!("estimator.theta_init has length {}, model has d = {d}", t.len());
            }
        }
        self.iter_config()?;
        if let Some(StatePriorSpec::Fixed { mean, cov }) = &self.prior {
            gaussian(
                &GaussianSpec {
                    mean: mean.clone(),
                    cov: cov.clone(),
                },
                "prior",
            )?;
        }
        if let Some(b) = &self.benchmark {
            for m in &b.methods {
                m.parse::<Method>()?;
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ParamAffineModel> {
        let spec = &self.model;
        let f = spec
            .f
            .iter()
            .enumerate()
            .map(|(i, m)| matrix(m, &format!("model.f[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let h = spec
            .h
            .iter()
            .enumerate()
            .map(|(i, m)| matrix(m, &format!("model.h[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let model = ParamAffineModel::new(f, h, matrix(&spec.q, "model.q")?, matrix(&spec.r, "model.r")?)
            .context("invalid model")?;
        for (name, given, actual) in [
            ("n", spec.n, model.n()),
            ("m", spec.m, model.m()),
            ("d", spec.d, model.d()),
        ] {
            if let Some(g) = given {
                if g != actual {
                    bail!("model.{name} = {g} but the matrices imply {actual}");
                }
            }
        }
        Ok(model)
    }

    pub fn iter_config(&self) -> Result<IterConfig> {
        let e = &self.estimator;
        if e.max_iter == 0 || !(e.tol > 0.0) {
            bail!("estimator.max_iter must be >= 1 and estimator.tol > 0");
        }
        if !(e.aseks_param_walk_var >= 0.0) {
            bail!("estimator.aseks_param_walk_var must be >= 0");
        }
        Ok(IterConfig {
            max_iter: e.max_iter,
            tol: e.tol,
            theta_init: e.theta_init.clone().map(DVector::from_vec),
        })
    }

    pub fn aseks_config(&self) -> AseksConfig {
        AseksConfig {
            param_walk_var: self.estimator.aseks_param_walk_var,
        }
    }

    /// Parameter prior; an empty density when `d = 0`.
    pub fn theta_prior(&self, d: usize) -> Result<GaussianDensity> {
        match &self.theta_prior {
            Some(tp) => gaussian(tp, "theta_prior"),
            None if d == 0 => Ok(GaussianDensity::new(DVector::zeros(0), DMatrix::zeros(0, 0))?),
            None => bail!("a [theta_prior] section is required when d > 0"),
        }
    }

    /// Parameter value used to evaluate `H` and the stationary covariance
    /// for data-driven state priors.
    fn reference_theta(&self, explicit: &Option<Vec<f64>>) -> Option<Vec<f64>> {
        explicit
            .clone()
            .or_else(|| self.simulate.as_ref().map(|s| s.theta_true.clone()))
            .or_else(|| self.theta_prior.as_ref().map(|t| t.mean.clone()))
    }

    /// State prior for estimation on a given data set.
    pub fn state_prior(&self, model: &ParamAffineModel, y: &DMatrix<f64>) -> Result<GaussianDensity> {
        match self
            .prior
            .as_ref()
            .ok_or_else(|| anyhow!("a [prior] section is required"))?
        {
            StatePriorSpec::Fixed { mean, cov } => gaussian(
                &GaussianSpec {
                    mean: mean.clone(),
                    cov: cov.clone(),
                },
                "prior",
            ),
            StatePriorSpec::FirstMeasurement {
                cov_scale,
                reuse_first,
                reference_theta,
            } => {
                if !reuse_first {
                    bail!("prior.reuse_first = false only applies to benchmark runs");
                }
                if y.ncols() == 0 {
                    bail!("a first-measurement prior needs at least one measurement");
                }
                let theta = DVector::from_vec(
                    self.reference_theta(reference_theta)
                        .unwrap_or_else(|| vec![0.0; model.d()]),
                );
                let h = model.eval_h(&theta)?;
                let pinv = h.pseudo_inverse(1e-12).map_err(|e| anyhow!(e))?;
                let p = stationary_cov(model, &theta)?;
                Ok(GaussianDensity::new(&pinv * y.column(0), p * *cov_scale)?)
            }
        }
    }

    pub fn initial_state_density(&self, model: &ParamAffineModel) -> Result<GaussianDensity> {
        let sim = self
            .simulate
            .as_ref()
            .ok_or_else(|| anyhow!("a [simulate] section is required"))?;
        match &sim.x0 {
            Some(g) => gaussian(g, "simulate.x0"),
            None => {
                let p = stationary_cov(model, &DVector::from_vec(sim.theta_true.clone()))?;
                Ok(GaussianDensity::new(DVector::zeros(model.n()), p)?)
            }
        }
    }

    /// Fills every benchmark default in place so the config can be written
    /// out as the exact record of a run.
    pub fn resolve_benchmark(&mut self) -> Result<()> {
        let fallback_theta = self.simulate.as_ref().map(|s| s.theta_true.clone());
        let b = self
            .benchmark
            .as_mut()
            .ok_or_else(|| anyhow!("a [benchmark] section is required"))?;
        if b.theta_true.is_none() {
            b.theta_true = Some(
                fallback_theta
                    .ok_or_else(|| anyhow!("benchmark.theta_true or simulate.theta_true is required"))?,
            );
        }
        if b.ellipse_batch.is_none() {
            b.ellipse_batch = if b.batch_sizes.contains(&30) {
                Some(30)
            } else {
                b.batch_sizes.first().copied()
            };
        }
        if self.prior.is_none() {
            self.prior = Some(StatePriorSpec::FirstMeasurement {
                cov_scale: default_cov_scale(),
                reuse_first: true,
                reference_theta: None,
            });
        }
        Ok(())
    }

    /// Monte Carlo settings; call [`ExperimentConfig::resolve_benchmark`]
    /// first.
    pub fn mc_config(&self) -> Result<McConfig> {
        let model = self.model()?;
        let b = self
            .benchmark
            .as_ref()
            .ok_or_else(|| anyhow!("a [benchmark] section is required"))?;
        let theta_true = DVector::from_vec(
            b.theta_true
                .clone()
                .ok_or_else(|| anyhow!("benchmark.theta_true unresolved"))?,
        );
        let methods = b
            .methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<Vec<_>, _>>()?;
        let state_prior = match self.prior.as_ref() {
            Some(StatePriorSpec::Fixed { mean, cov }) => StatePrior::Fixed(gaussian(
                &GaussianSpec {
                    mean: mean.clone(),
                    cov: cov.clone(),
                },
                "prior",
            )?),
            Some(StatePriorSpec::FirstMeasurement {
                cov_scale,
                reuse_first,
                ..
            }) => StatePrior::FromMeasurement {
                cov_scale: *cov_scale,
                reuse_first: *reuse_first,
            },
            None => bail!("state prior unresolved"),
        };
        let mut iter = self.iter_config()?;
        // Each replication starts from its own drawn θ̂¹.
        iter.theta_init = None;
        let cfg = McConfig {
            model,
            theta_true,
            batch_sizes: b.batch_sizes.clone(),
            replications: b.replications,
            seed: b.seed,
            sigma_theta: matrix(&b.sigma_theta, "benchmark.sigma_theta")?,
            methods,
            iter,
            aseks: self.aseks_config(),
            state_prior,
            ellipse_batch: b.ellipse_batch,
            confidence: b.confidence,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

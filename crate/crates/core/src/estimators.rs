//! Parameter least squares and the four joint state/parameter estimators.
//!
//! JMAP-ML, EM and PEIV share one loop: smooth the states at the current
//! parameter, then solve a parameter subproblem given the smoothed states.
//! They differ only in that subproblem:
//!
//! | method  | parameter step                                                  |
//! |---------|-----------------------------------------------------------------|
//! | JMAP-ML | `(ΦᵀWΦ)⁻¹ ΦᵀW(Ȳ - c)`                                           |
//! | EM      | same with expectations over `p(X | Y, θ̂ⁱ)`                      |
//! | PEIV    | `N⁻¹ (Σ_θ⁻¹ θ̂¹ + ΦᵀW(Ȳ - c))`, `N = Σ_θ⁻¹ + ΦᵀWΦ`             |
//!
//! with `W = Σ_η⁻¹`, `Φ = Φ(X̂)` and `c = c(X̂)`.
//!
//! Each iteration smooths at `θ̂ⁱ` and returns `θ̂ⁱ⁺¹` computed from those
//! states. The returned estimate pairs the last parameter step with the states
//! it was computed from, so it exactly minimizes the parameter subproblem for
//! the returned `X̂`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::batch::{assemble, BatchSystem};
use crate::blocktri::StateCovariance;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GaussianDensity, ParamAffineModel};
use crate::smoother::{self, forward_backward, smooth_rts, Dynamics, SmoothResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Peiv,
    JmapMl,
    Em,
    Aseks,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Peiv, Method::JmapMl, Method::Em, Method::Aseks];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Peiv => "peiv",
            Method::JmapMl => "jmapml",
            Method::Em => "em",
            Method::Aseks => "aseks",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "peiv" => Ok(Method::Peiv),
            "jmapml" => Ok(Method::JmapMl),
            "em" => Ok(Method::Em),
            "aseks" => Ok(Method::Aseks),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterConfig {
    pub max_iter: usize,
    /// Stop when `‖θ̂ⁱ⁺¹ - θ̂ⁱ‖ / (1 + ‖θ̂ⁱ‖)` drops below this.
    pub tol: f64,
    /// Starting point for JMAP-ML and EM. PEIV always starts from the prior
    /// mean.
    pub theta_init: Option<DVector<f64>>,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            theta_init: None,
        }
    }
}

impl IterConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AseksConfig {
    /// Variance of the random walk on the parameter block per step.
    pub param_walk_var: f64,
}

impl Default for AseksConfig {
    fn default() -> Self {
        Self {
            param_walk_var: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub method: Method,
    pub theta_hat: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
    /// `n x (N+1)` smoothed states.
    pub xhat: DMatrix<f64>,
    pub state_cov: StateCovariance,
    pub iterations: usize,
    pub converged: bool,
    /// JMAP-ML/PEIV: cost after each parameter step. EM: `log p(Y | θ̂ⁱ)` of
    /// each E-step. ASEKS: the single pass's log-likelihood.
    pub objective_trace: Vec<f64>,
    /// ASEKS only: smoothed parameter at `k = 0` (`theta_hat` is `k = N`).
    pub theta_initial: Option<DVector<f64>>,
}

impl JointEstimate {
    pub fn stacked_states(&self) -> DVector<f64> {
        DVector::from_column_slice(self.xhat.as_slice())
    }
}

/// Solves `A θ = b` for SPD `A`, reporting an unidentifiable parameter when
/// `A` is singular.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if a.nrows() == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let scale = a.amax();
    let chol = linalg::cholesky(a)
        .filter(|c| {
            let diag = c.l_dirty().diagonal();
            let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
            scale > 0.0 && min * min > 1e-14 * scale
        })
        .ok_or_else(|| Error::Unidentifiable("singular parameter normal matrix".into()))?;
    let theta = chol.solve(b);
    let cov = linalg::symmetrize(&chol.inverse());
    Ok((theta, cov))
}

/// Weighted regressor products `ΦᵀWΦ` and `ΦᵀW(Ȳ - c)` at `x`.
fn regressor_moments(sys: &BatchSystem, x: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (phi, c) = sys.regressor_phi(x)?;
    let wphi = sys.weighted_columns(&phi);
    Ok((phi.transpose() * &wphi, wphi.transpose() * (sys.ybar() - c)))
}

/// `θ̂ = (ΦᵀWΦ)⁻¹ ΦᵀW(Ȳ - c)` and its covariance `(ΦᵀWΦ)⁻¹` for fixed states.
pub fn param_ls(sys: &BatchSystem, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (a, b) = regressor_moments(sys, x)?;
    solve_spd(&a, &b)
}

/// EM M-step. With `cov = None` the expectation is degenerate and this is
/// [`param_ls`].
pub fn em_update(
    sys: &BatchSystem,
    x: &DVector<f64>,
    cov: Option<&StateCovariance>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mut a, mut b) = regressor_moments(sys, x)?;
    if let Some(cov) = cov {
        let basis = sys.psi_basis();
        for i in 0..basis.len() {
            for j in 0..=i {
                let t = sys.weighted_trace(&basis[i], &basis[j], cov)?;
                a[(i, j)] += t;
                if i != j {
                    a[(j, i)] += t;
                }
            }
            b[i] -= sys.weighted_trace(&basis[i], sys.psi_base(), cov)?;
        }
    }
    solve_spd(&a, &b)
}

/// The regularized parameter step and `N⁻¹`.
pub fn peiv_update(
    sys: &BatchSystem,
    x: &DVector<f64>,
    theta_prior: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (a, b) = regressor_moments(sys, x)?;
    solve_spd(&(prior_precision + a), &(prior_precision * theta_prior + b))
}

/// `J(θ, X) = ‖θ - θ̂¹‖²_{Σ_θ⁻¹} + ‖Ȳ - Ψ(θ)X‖²_{Σ_η⁻¹}`.
pub fn peiv_cost(
    sys: &BatchSystem,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    theta_prior: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
) -> Result<f64> {
    let dt = theta - theta_prior;
    Ok(dt.dot(&(prior_precision * &dt)) + sys.cost(theta, x)?)
}

struct Step {
    theta: DVector<f64>,
    cov: DMatrix<f64>,
    objective: f64,
}

fn check_inputs(model: &ParamAffineModel, theta0: &DVector<f64>) -> Result<()> {
    if theta0.len() != model.d() {
        return Err(Error::dim(format!(
            "initial parameter has length {}, model has d = {}",
            theta0.len(),
            model.d()
        )));
    }
    Ok(())
}

fn iterate<S>(
    method: Method,
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
    theta0: DVector<f64>,
    cfg: &IterConfig,
    mut step: S,
) -> Result<JointEstimate>
where
    S: FnMut(&BatchSystem, &DVector<f64>, &SmoothResult) -> Result<Step>,
{
    cfg.validate()?;
    check_inputs(model, &theta0)?;
    let sys = assemble(model, y, prior)?;
    let mut theta = theta0;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let (smoothed, cov) = loop {
        iterations += 1;
        let smoothed = smooth_rts(model, &theta, y, prior)?;
        let next = step(&sys, &theta, &smoothed)?;
        trace.push(next.objective);
        let change = (&next.theta - &theta).norm() / (1.0 + theta.norm());
        theta = next.theta;
        if change < cfg.tol {
            converged = true;
        }
        if converged || iterations >= cfg.max_iter {
            break (smoothed, next.cov);
        }
    };
    Ok(JointEstimate {
        method,
        theta_hat: theta,
        theta_cov: cov,
        xhat: smoothed.means,
        state_cov: smoothed.cov,
        iterations,
        converged,
        objective_trace: trace,
        theta_initial: None,
    })
}

fn start(model: &ParamAffineModel, cfg: &IterConfig) -> DVector<f64> {
    cfg.theta_init
        .clone()
        .unwrap_or_else(|| DVector::zeros(model.d()))
}

/// Coordinate iteration: MAP states given `θ`, least-squares `θ` given the
/// states. The trace holds `‖Ȳ - Ψ(θ̂ⁱ⁺¹)X̂ⁱ⁺¹‖²_{Σ_η⁻¹}`.
pub fn jmap_ml(
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
    cfg: &IterConfig,
) -> Result<JointEstimate> {
    iterate(Method::JmapMl, model, y, prior, start(model, cfg), cfg, |sys, _, s| {
        let x = s.stacked_means();
        let (theta, cov) = param_ls(sys, &x)?;
        let objective = sys.cost(&theta, &x)?;
        Ok(Step {
            theta,
            cov,
            objective,
        })
    })
}

/// Expectation maximization. The E-step is the RTS smoother at `θ̂ⁱ`; the
/// M-step adds `tr(Ψ_iᵀ W Ψ_j Σ_X)` and `-tr(Ψ_iᵀ W Ψ_base Σ_X)` to the
/// least-squares moments. `theta_cov` is the inverse expected information of
/// the complete-data problem at the last step.
pub fn em(
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
    cfg: &IterConfig,
) -> Result<JointEstimate> {
    iterate(Method::Em, model, y, prior, start(model, cfg), cfg, |sys, _, s| {
        let x = s.stacked_means();
        let (theta, cov) = em_update(sys, &x, Some(&s.cov))?;
        Ok(Step {
            theta,
            cov,
            objective: s.loglik,
        })
    })
}

/// Partial errors-in-variables estimator.
///
/// `theta_prior.mean` is both the starting point and the regularization
/// center. `theta_cov` is `N⁻¹` at the returned states.
pub fn peiv(
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
    theta_prior: &GaussianDensity,
    cfg: &IterConfig,
) -> Result<JointEstimate> {
    if theta_prior.dim() != model.d() {
        return Err(Error::dim("parameter prior dimension does not match d"));
    }
    let precision = if model.d() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        linalg::spd_inverse(&theta_prior.cov)
            .ok_or_else(|| Error::Config("parameter prior covariance is singular".into()))?
    };
    let center = theta_prior.mean.clone();
    iterate(Method::Peiv, model, y, prior, center.clone(), cfg, |sys, _, s| {
        let x = s.stacked_means();
        let (theta, cov) = peiv_update(sys, &x, &center, &precision)?;
        let objective = peiv_cost(sys, &theta, &x, &center, &precision)?;
        Ok(Step {
            theta,
            cov,
            objective,
        })
    })
}

/// `z = [x; θ]` with `z_{k+1} = [F(θ) x; θ] + [v; w]`, `y = H(θ) x + e`.
struct AugmentedDynamics<'a> {
    model: &'a ParamAffineModel,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl AugmentedDynamics<'_> {
    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.model.n();
        (z.rows(0, n).clone_owned(), z.rows(n, self.model.d()).clone_owned())
    }
}

impl Dynamics for AugmentedDynamics<'_> {
    fn dim(&self) -> usize {
        self.model.n() + self.model.d()
    }

    fn propagate(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.model.n(), self.model.d());
        let (x, theta) = self.split(z);
        let f = self.model.eval_f(&theta).expect("parameter block has length d");
        let mut out = DVector::zeros(n + d);
        out.rows_mut(0, n).copy_from(&(&f * &x));
        out.rows_mut(n, d).copy_from(&theta);
        let mut jac = DMatrix::zeros(n + d, n + d);
        jac.view_mut((0, 0), (n, n)).copy_from(&f);
        for i in 0..d {
            jac.view_mut((0, n + i), (n, 1))
                .copy_from(&(&self.model.f_basis()[i + 1] * &x));
            jac[(n + i, n + i)] = 1.0;
        }
        (out, jac)
    }

    fn observe(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d, m) = (self.model.n(), self.model.d(), self.model.m());
        let (x, theta) = self.split(z);
        let h = self.model.eval_h(&theta).expect("parameter block has length d");
        let mut jac = DMatrix::zeros(m, n + d);
        jac.view_mut((0, 0), (m, n)).copy_from(&h);
        for i in 0..d {
            jac.view_mut((0, n + i), (m, 1))
                .copy_from(&(&self.model.h_basis()[i + 1] * &x));
        }
        (&h * &x, jac)
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn meas_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Jacobian of the augmented transition at `(x, θ)`; exposed for checking.
pub fn augmented_jacobian(
    model: &ParamAffineModel,
    x: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(model, theta)?;
    if x.len() != model.n() {
        return Err(Error::dim("state has wrong length"));
    }
    let dynamics = AugmentedDynamics {
        model,
        q: DMatrix::zeros(0, 0),
        r: DMatrix::zeros(0, 0),
    };
    let mut z = DVector::zeros(model.n() + model.d());
    z.rows_mut(0, model.n()).copy_from(x);
    z.rows_mut(model.n(), model.d()).copy_from(theta);
    Ok(dynamics.propagate(&z))
}

/// Augmented-state extended Kalman smoother: one linearized forward-backward
/// pass with `z_0 ~ N([m₀; θ̂¹], diag(P₀, Σ_θ))`.
pub fn aseks(
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
    theta_prior: &GaussianDensity,
    cfg: &AseksConfig,
) -> Result<JointEstimate> {
    let (n, d) = (model.n(), model.d());
    if theta_prior.dim() != d {
        return Err(Error::dim("parameter prior dimension does not match d"));
    }
    if prior.dim() != n {
        return Err(Error::dim("state prior dimension does not match n"));
    }
    if y.ncols() > 0 && y.nrows() != model.m() {
        return Err(Error::dim("measurement rows do not match m"));
    }
    if !(cfg.param_walk_var >= 0.0) {
        return Err(Error::Config("parameter random-walk variance must be >= 0".into()));
    }
    let (q, jq) = smoother::regularized(model.q());
    let (r, jr) = smoother::regularized(model.r());
    let mut q_aug = DMatrix::zeros(n + d, n + d);
    q_aug.view_mut((0, 0), (n, n)).copy_from(&q);
    for i in 0..d {
        q_aug[(n + i, n + i)] = cfg.param_walk_var;
    }
    let mut m0 = DVector::zeros(n + d);
    m0.rows_mut(0, n).copy_from(&prior.mean);
    m0.rows_mut(n, d).copy_from(&theta_prior.mean);
    let mut p0 = DMatrix::zeros(n + d, n + d);
    p0.view_mut((0, 0), (n, n)).copy_from(&prior.cov);
    p0.view_mut((n, n), (d, d)).copy_from(&theta_prior.cov);

    let dynamics = AugmentedDynamics { model, q: q_aug, r };
    let mut smoothed = forward_backward(&dynamics, y, &m0, &p0).map_err(|e| match e {
        Error::Numerical(msg) => Error::Divergence(msg),
        other => other,
    })?;
    smoothed.jittered = jq || jr;

    let steps = y.ncols();
    let xhat = smoothed.means.rows(0, n).clone_owned();
    let theta_hat = smoothed.means.view((n, steps), (d, 1)).column(0).clone_owned();
    let theta_initial = smoothed.means.view((n, 0), (d, 1)).column(0).clone_owned();
    let theta_cov = smoothed.cov.marginals[steps].view((n, n), (d, d)).clone_owned();
    let state_cov = StateCovariance {
        marginals: smoothed
            .cov
            .marginals
            .iter()
            .map(|b| b.view((0, 0), (n, n)).clone_owned())
            .collect(),
        lag_one: smoothed
            .cov
            .lag_one
            .iter()
            .map(|b| b.view((0, 0), (n, n)).clone_owned())
            .collect(),
    };
    if !linalg::all_finite(&theta_hat) || !linalg::all_finite(&theta_initial) {
        return Err(Error::Divergence("non-finite parameter estimate".into()));
    }
    Ok(JointEstimate {
        method: Method::Aseks,
        theta_hat,
        theta_cov,
        xhat,
        state_cov,
        iterations: 1,
        converged: true,
        objective_trace: vec![smoothed.loglik],
        theta_initial: Some(theta_initial),
    })
}

/// Runs `method` with the shared inputs. `theta_prior` supplies the PEIV and
/// ASEKS prior; JMAP-ML and EM start at `cfg.theta_init` or, if unset, at its
/// mean.
pub fn estimate(
    method: Method,
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
    theta_prior: &GaussianDensity,
    cfg: &IterConfig,
    aseks_cfg: &AseksConfig,
) -> Result<JointEstimate> {
    let with_start = || {
        let mut c = cfg.clone();
        if c.theta_init.is_none() {
            c.theta_init = Some(theta_prior.mean.clone());
        }
        c
    };
    match method {
        Method::Peiv => peiv(model, y, prior, theta_prior, cfg),
        Method::JmapMl => jmap_ml(model, y, prior, &with_start()),
        Method::Em => em(model, y, prior, &with_start()),
        Method::Aseks => aseks(model, y, prior, theta_prior, aseks_cfg),
    }
}

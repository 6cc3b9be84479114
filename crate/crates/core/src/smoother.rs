//! MAP state estimation for a fixed parameter.
//!
//! Two routes compute the same estimate:
//!
//! - [`smooth_batch`] solves the normal equations of the stacked regression
//!   with a block-tridiagonal Cholesky factorization.
//! - [`smooth_rts`] runs a Kalman filter forward and the Rauch-Tung-Striebel
//!   recursion backward, also producing the marginal and lag-one smoothed
//!   covariances and the log marginal likelihood from the innovations.
//!
//! The forward-backward core is shared with the augmented-state smoother in
//! [`crate::estimators::aseks`] through the [`Dynamics`] trait.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::batch::BatchSystem;
use crate::blocktri::{BlockTridiagCholesky, StateCovariance};
use crate::error::{Error, Result};
use crate::linalg::{self, JITTER};
use crate::model::{GaussianDensity, ParamAffineModel};

/// Smoothed trajectory over `x_0..x_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothResult {
    /// `n x (N+1)`, column `k` is `x̂_{k|N}`.
    pub means: DMatrix<f64>,
    pub cov: StateCovariance,
    /// `log p(Y | θ)`.
    pub loglik: f64,
    /// A singular `Q` or `R` was replaced by `Q + 1e-12 I` / `R + 1e-12 I`.
    pub jittered: bool,
}

impl SmoothResult {
    /// Means stacked as `[x_0; x_1; ...; x_N]`.
    pub fn stacked_means(&self) -> DVector<f64> {
        DVector::from_column_slice(self.means.as_slice())
    }
}

/// Solution of the stacked normal equations.
#[derive(Debug, Clone)]
pub struct BatchSmooth {
    pub xhat: DVector<f64>,
    factor: BlockTridiagCholesky,
}

impl BatchSmooth {
    /// Marginal and lag-one blocks of `(Ψᵀ Σ_η⁻¹ Ψ)⁻¹`.
    pub fn covariance(&self) -> StateCovariance {
        self.factor.selected_inverse()
    }

    /// Full `(Ψᵀ Σ_η⁻¹ Ψ)⁻¹`. Cubic in the window length; for checking only.
    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let dim = self.xhat.len();
        let mut out = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = DVector::zeros(dim);
            e[j] = 1.0;
            out.set_column(j, &self.factor.solve(&e));
        }
        linalg::symmetrize(&out)
    }

    pub fn normal_log_det(&self) -> f64 {
        self.factor.log_det()
    }
}

/// `X̂ = (Ψᵀ Σ_η⁻¹ Ψ)⁻¹ Ψᵀ Σ_η⁻¹ Ȳ` at `theta`.
pub fn smooth_batch(sys: &BatchSystem, theta: &DVector<f64>) -> Result<BatchSmooth> {
    let (normal, rhs) = sys.normal_equations(theta)?;
    let factor = normal.cholesky()?;
    let xhat = factor.solve(&rhs);
    Ok(BatchSmooth { xhat, factor })
}

/// Transition and measurement maps with their Jacobians.
pub(crate) trait Dynamics {
    fn dim(&self) -> usize;
    /// `f(z)` and `∂f/∂z`.
    fn propagate(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    /// `h(z)` and `∂h/∂z`.
    fn observe(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    fn process_cov(&self) -> &DMatrix<f64>;
    fn meas_cov(&self) -> &DMatrix<f64>;
}

struct LinearDynamics {
    f: DMatrix<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.f.nrows()
    }

    fn propagate(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.f * z, self.f.clone())
    }

    fn observe(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.h * z, self.h.clone())
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn meas_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Loads the diagonal of a singular covariance; the flag reports it.
pub(crate) fn regularized(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if linalg::cholesky(cov).is_some() {
        (cov.clone(), false)
    } else {
        let n = cov.nrows();
        (cov + DMatrix::identity(n, n) * JITTER, true)
    }
}

fn linear_dynamics(
    model: &ParamAffineModel,
    theta: &DVector<f64>,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
) -> Result<(LinearDynamics, bool)> {
    if prior.dim() != model.n() {
        return Err(Error::dim("state prior dimension does not match n"));
    }
    if y.ncols() > 0 && y.nrows() != model.m() {
        return Err(Error::dim(format!(
            "measurements have {} rows, model has m = {}",
            y.nrows(),
            model.m()
        )));
    }
    let (q, jq) = regularized(model.q());
    let (r, jr) = regularized(model.r());
    let dynamics = LinearDynamics {
        f: model.eval_f(theta)?,
        h: model.eval_h(theta)?,
        q,
        r,
    };
    Ok((dynamics, jq || jr))
}

/// Forward Kalman filter and backward RTS pass over `theta`.
pub fn smooth_rts(
    model: &ParamAffineModel,
    theta: &DVector<f64>,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
) -> Result<SmoothResult> {
    let (dynamics, jittered) = linear_dynamics(model, theta, y, prior)?;
    let mut out = forward_backward(&dynamics, y, &prior.mean, &prior.cov)?;
    out.jittered = jittered;
    Ok(out)
}

/// `log p(Y | θ)` by the prediction-error decomposition.
pub fn loglik(
    model: &ParamAffineModel,
    theta: &DVector<f64>,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
) -> Result<f64> {
    let (dynamics, _) = linear_dynamics(model, theta, y, prior)?;
    Ok(forward(&dynamics, y, &prior.mean, &prior.cov)?.loglik)
}

pub(crate) struct FilterPass {
    filtered_means: Vec<DVector<f64>>,
    filtered_covs: Vec<DMatrix<f64>>,
    predicted_means: Vec<DVector<f64>>,
    predicted_covs: Vec<DMatrix<f64>>,
    /// Jacobian used to predict `k + 1` from `k`.
    jacobians: Vec<DMatrix<f64>>,
    loglik: f64,
}

fn non_finite(what: &str, k: usize) -> Error {
    Error::Numerical(format!("non-finite {what} at step {k}"))
}

pub(crate) fn forward<D: Dynamics>(
    dynamics: &D,
    y: &DMatrix<f64>,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<FilterPass> {
    let n = dynamics.dim();
    let steps = y.ncols();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut pass = FilterPass {
        filtered_means: Vec::with_capacity(steps + 1),
        filtered_covs: Vec::with_capacity(steps + 1),
        predicted_means: Vec::with_capacity(steps),
        predicted_covs: Vec::with_capacity(steps),
        jacobians: Vec::with_capacity(steps),
        loglik: 0.0,
    };
    pass.filtered_means.push(m0.clone());
    pass.filtered_covs.push(p0.clone());

    for k in 1..=steps {
        let (xp, jac) = dynamics.propagate(&pass.filtered_means[k - 1]);
        let pp = linalg::symmetrize(
            &(&jac * &pass.filtered_covs[k - 1] * jac.transpose() + dynamics.process_cov()),
        );
        let (yp, hjac) = dynamics.observe(&xp);
        let innov = y.column(k - 1) - &yp;
        let pht = &pp * hjac.transpose();
        let s = linalg::symmetrize(&(&hjac * &pht + dynamics.meas_cov()));
        let chol = linalg::cholesky(&s).ok_or_else(|| {
            Error::Numerical(format!("innovation covariance not positive definite at step {k}"))
        })?;
        // K = P Hᵀ S⁻¹, via S Kᵀ = H P
        let gain = chol.solve(&pht.transpose()).transpose();
        let xf = &xp + &gain * &innov;
        let ikh = &eye - &gain * &hjac;
        let pf = linalg::symmetrize(
            &(&ikh * &pp * ikh.transpose() + &gain * dynamics.meas_cov() * gain.transpose()),
        );
        let quad = innov.dot(&chol.solve(&innov));
        pass.loglik -=
            0.5 * (innov.len() as f64 * (2.0 * PI).ln() + linalg::chol_logdet(&chol) + quad);

        if !linalg::all_finite(&xf) || pf.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("filtered estimate", k));
        }
        pass.predicted_means.push(xp);
        pass.predicted_covs.push(pp);
        pass.jacobians.push(jac);
        pass.filtered_means.push(xf);
        pass.filtered_covs.push(pf);
    }
    if !pass.loglik.is_finite() {
        return Err(non_finite("log-likelihood", steps));
    }
    Ok(pass)
}

pub(crate) fn forward_backward<D: Dynamics>(
    dynamics: &D,
    y: &DMatrix<f64>,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<SmoothResult> {
    let n = dynamics.dim();
    let steps = y.ncols();
    let pass = forward(dynamics, y, m0, p0)?;

    let mut means = DMatrix::zeros(n, steps + 1);
    let mut cov = StateCovariance::zeros(steps + 1, n);
    means.set_column(steps, &pass.filtered_means[steps]);
    cov.marginals[steps] = pass.filtered_covs[steps].clone();

    for k in (0..steps).rev() {
        let pp = &pass.predicted_covs[k];
        let chol = linalg::cholesky(pp).ok_or_else(|| {
            Error::Numerical(format!("predicted covariance not positive definite at step {}", k + 1))
        })?;
        // G = P_{k|k} Jᵀ P_{k+1|k}⁻¹, via P_{k+1|k} Gᵀ = J P_{k|k}
        let pf = &pass.filtered_covs[k];
        let gain = chol.solve(&(&pass.jacobians[k] * pf)).transpose();
        let next_mean = means.column(k + 1).clone_owned();
        let xs = &pass.filtered_means[k] + &gain * (next_mean - &pass.predicted_means[k]);
        let ps = linalg::symmetrize(
            &(pf + &gain * (&cov.marginals[k + 1] - pp) * gain.transpose()),
        );
        if !linalg::all_finite(&xs) {
            return Err(non_finite("smoothed estimate", k));
        }
        cov.lag_one[k] = &gain * &cov.marginals[k + 1];
        cov.marginals[k] = ps;
        means.set_column(k, &xs);
    }
    Ok(SmoothResult {
        means,
        cov,
        loglik: pass.loglik,
        jittered: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::assemble;
    use crate::model::simulate;

    fn scalar() -> ParamAffineModel {
        ParamAffineModel::scalar_ar1(0.2, 0.09).unwrap()
    }

    fn theta(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn prior_only_window() {
        let model = scalar();
        let prior = GaussianDensity::scalar(0.7, 1.5).unwrap();
        let y = DMatrix::zeros(1, 0);
        let sys = assemble(&model, &y, &prior).unwrap();
        let b = smooth_batch(&sys, &theta(0.9)).unwrap();
        assert!((b.xhat[0] - 0.7).abs() < 1e-15);
        assert!((b.dense_covariance()[(0, 0)] - 1.5).abs() < 1e-14);
        let r = smooth_rts(&model, &theta(0.9), &y, &prior).unwrap();
        assert_eq!(r.means[(0, 0)], 0.7);
        assert_eq!(r.loglik, 0.0);
    }

    #[test]
    fn batch_matches_dense_weighted_least_squares() {
        let model = scalar();
        let prior = GaussianDensity::scalar(0.1, 2.0).unwrap();
        let y = DMatrix::from_row_slice(1, 2, &[0.4, -0.3]);
        let sys = assemble(&model, &y, &prior).unwrap();
        let b = smooth_batch(&sys, &theta(0.9)).unwrap();

        let psi = sys.psi(&theta(0.9)).unwrap().to_dense();
        let w = sys.sigma_eta_inv_dense();
        let normal = psi.transpose() * &w * &psi;
        let inv = normal.clone().try_inverse().unwrap();
        let oracle = &inv * psi.transpose() * &w * sys.ybar();
        assert!((&b.xhat - oracle).amax() < 1e-10);
        assert!((b.dense_covariance() - &inv).amax() < 1e-10);
        let sel = b.covariance();
        for k in 0..3 {
            assert!((sel.marginals[k][(0, 0)] - inv[(k, k)]).abs() < 1e-10);
        }
    }

    #[test]
    fn measurement_dominated_limit_inverts_h() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.0]);
        let model = ParamAffineModel::new(
            vec![DMatrix::identity(2, 2) * 0.5],
            vec![h.clone()],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 1e-12,
        )
        .unwrap();
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 0.2, -0.4, 0.3, 0.9, 1.4]);
        let prior = GaussianDensity::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let sys = assemble(&model, &y, &prior).unwrap();
        let b = smooth_batch(&sys, &DVector::zeros(0)).unwrap();
        let hinv = h.try_inverse().unwrap();
        for k in 1..=3 {
            let expect = &hinv * y.column(k - 1);
            let got = b.xhat.rows(2 * k, 2);
            assert!((got - expect).amax() < 1e-8);
        }
    }

    #[test]
    fn rts_matches_batch_on_scalar_model() {
        let model = scalar();
        let t = theta(0.9);
        let x0 = GaussianDensity::scalar(0.0, 1.0526).unwrap();
        let traj = simulate(&model, &t, &x0, 50, 3).unwrap();
        let prior = GaussianDensity::scalar(traj.measurements[(0, 0)], 2.1).unwrap();
        let sys = assemble(&model, &traj.measurements, &prior).unwrap();
        let b = smooth_batch(&sys, &t).unwrap();
        let r = smooth_rts(&model, &t, &traj.measurements, &prior).unwrap();
        let xr = r.stacked_means();
        let scale = 1.0 + b.xhat.amax();
        assert!((&xr - &b.xhat).amax() <= 1e-8 * scale);
        let sel = b.covariance();
        for k in 0..=50 {
            assert!((&sel.marginals[k] - &r.cov.marginals[k]).amax() < 1e-10);
        }
        for k in 0..50 {
            assert!((&sel.lag_one[k] - &r.cov.lag_one[k]).amax() < 1e-10);
        }
    }

    #[test]
    fn noise_free_data_is_recovered() {
        let model = ParamAffineModel::scalar_ar1(0.0, 0.0).unwrap();
        let t = theta(0.9);
        let x0 = GaussianDensity::scalar(1.0, 0.0).unwrap();
        let traj = simulate(&model, &t, &x0, 8, 1).unwrap();
        let prior = GaussianDensity::scalar(1.0, 1.0).unwrap();
        let r = smooth_rts(&model, &t, &traj.measurements, &prior).unwrap();
        assert!(r.jittered);
        assert!((&r.means - &traj.states).amax() < 1e-9);
    }

    #[test]
    fn single_step_loglik_closed_form() {
        let model = scalar();
        let (m0, p0, y1, th) = (0.3, 1.7, 1.1, 0.9);
        let prior = GaussianDensity::scalar(m0, p0).unwrap();
        let y = DMatrix::from_element(1, 1, y1);
        let ll = loglik(&model, &theta(th), &y, &prior).unwrap();
        let s = th * p0 * th + 0.2 + 0.09;
        let mu = th * m0;
        let expect = -0.5 * ((2.0 * PI * s).ln() + (y1 - mu).powi(2) / s);
        assert!((ll - expect).abs() < 1e-13);
    }

    #[test]
    fn outlier_lowers_loglik() {
        let model = scalar();
        let prior = GaussianDensity::scalar(0.0, 1.0).unwrap();
        let y = DMatrix::from_row_slice(1, 3, &[0.1, 0.3, 0.2]);
        let base = loglik(&model, &theta(0.9), &y, &prior).unwrap();
        let mut bad = y.clone();
        bad[(0, 2)] = 0.2 + 100.0 * 0.3;
        assert!(loglik(&model, &theta(0.9), &bad, &prior).unwrap() < base);
    }

    #[test]
    fn two_step_loglik_matches_quadrature() {
        // p(y1, y2) = ∫∫∫ p(x0) p(x1|x0) p(x2|x1) p(y1|x1) p(y2|x2); x0 is
        // integrated analytically into x1 ~ N(θ m0, θ² P0 + q), the rest on a
        // 2-D grid.
        let model = scalar();
        let (m0, p0, th, q, r) = (0.2, 0.8, 0.9, 0.2, 0.09);
        let (y1, y2) = (0.5, 0.1);
        let prior = GaussianDensity::scalar(m0, p0).unwrap();
        let y = DMatrix::from_row_slice(1, 2, &[y1, y2]);
        let ll = loglik(&model, &theta(th), &y, &prior).unwrap();

        let pdf = |x: f64, mu: f64, var: f64| (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
        let v1 = th * th * p0 + q;
        let (lo, hi, steps) = (-8.0, 8.0, 1600);
        let hstep = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let x1 = lo + i as f64 * hstep;
            let w1 = if i == 0 || i == steps { 0.5 } else { 1.0 };
            let outer = pdf(x1, th * m0, v1) * pdf(y1, x1, r);
            if outer < 1e-300 {
                continue;
            }
            let mut inner = 0.0;
            for j in 0..=steps {
                let x2 = lo + j as f64 * hstep;
                let w2 = if j == 0 || j == steps { 0.5 } else { 1.0 };
                inner += w2 * pdf(x2, th * x1, q) * pdf(y2, x2, r);
            }
            total += w1 * outer * inner * hstep;
        }
        total *= hstep;
        assert!((ll - total.ln()).abs() < 1e-6, "{ll} vs {}", total.ln());
    }

    #[test]
    fn covariances_do_not_depend_on_data() {
        let model = scalar();
        let prior = GaussianDensity::scalar(0.0, 1.0).unwrap();
        let a = DMatrix::from_row_slice(1, 4, &[0.1, 0.3, 0.2, -0.5]);
        let b = DMatrix::from_row_slice(1, 4, &[4.0, -2.0, 1.0, 0.0]);
        let ra = smooth_rts(&model, &theta(0.7), &a, &prior).unwrap();
        let rb = smooth_rts(&model, &theta(0.7), &b, &prior).unwrap();
        assert_eq!(ra.cov, rb.cov);
    }
}

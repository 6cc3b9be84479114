//! Parameter-affine state-space models, Gaussian priors and data generation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, is_psd};

/// `x_{k+1} = F(θ) x_k + v_k`, `y_k = H(θ) x_k + e_k` with
/// `F(θ) = F_0 + Σ θ_i F_i` and `H(θ) = H_0 + Σ θ_i H_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamAffineModel {
    f_basis: Vec<DMatrix<f64>>,
    h_basis: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl ParamAffineModel {
    /// `f_basis` and `h_basis` hold `F_0..F_d` and `H_0..H_d`.
    ///
    /// `Q` and `R` must be symmetric PSD. Singular noise covariances are
    /// accepted (noise-free simulation needs them) and get diagonal loading
    /// inside the smoothers; see [`ParamAffineModel::is_degenerate`].
    pub fn new(
        f_basis: Vec<DMatrix<f64>>,
        h_basis: Vec<DMatrix<f64>>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        if f_basis.is_empty() {
            return Err(Error::dim("at least F_0 is required"));
        }
        if f_basis.len() != h_basis.len() {
            return Err(Error::dim(format!(
                "{} F matrices but {} H matrices",
                f_basis.len(),
                h_basis.len()
            )));
        }
        let n = f_basis[0].nrows();
        let m = h_basis[0].nrows();
        if n == 0 {
            return Err(Error::dim("state dimension must be positive"));
        }
        for (i, f) in f_basis.iter().enumerate() {
            if f.shape() != (n, n) {
                return Err(Error::dim(format!("F_{i} is {:?}, expected {n}x{n}", f.shape())));
            }
        }
        for (i, h) in h_basis.iter().enumerate() {
            if h.shape() != (m, n) {
                return Err(Error::dim(format!("H_{i} is {:?}, expected {m}x{n}", h.shape())));
            }
        }
        if q.shape() != (n, n) {
            return Err(Error::dim(format!("Q is {:?}, expected {n}x{n}", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(Error::dim(format!("R is {:?}, expected {m}x{m}", r.shape())));
        }
        if !is_psd(&q) {
            return Err(Error::NotPositiveSemidefinite("Q"));
        }
        if !is_psd(&r) {
            return Err(Error::NotPositiveSemidefinite("R"));
        }
        Ok(Self {
            f_basis,
            h_basis,
            q,
            r,
        })
    }

    /// The scalar model `x_{k+1} = θ x_k + v_k`, `y_k = x_k + e_k`.
    pub fn scalar_ar1(q: f64, r: f64) -> Result<Self> {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(vec![s(0.0), s(1.0)], vec![s(1.0), s(0.0)], s(q), s(r))
    }

    pub fn n(&self) -> usize {
        self.f_basis[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.h_basis[0].nrows()
    }

    pub fn d(&self) -> usize {
        self.f_basis.len() - 1
    }

    pub fn f_basis(&self) -> &[DMatrix<f64>] {
        &self.f_basis
    }

    pub fn h_basis(&self) -> &[DMatrix<f64>] {
        &self.h_basis
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// True when `Q` or `R` is singular.
    pub fn is_degenerate(&self) -> bool {
        linalg::cholesky(&self.q).is_none() || linalg::cholesky(&self.r).is_none()
    }

    /// A copy of the model with the parameter removed (`d = 0`), frozen at
    /// `theta`.
    pub fn fixed_at(&self, theta: &DVector<f64>) -> Result<Self> {
        Ok(Self {
            f_basis: vec![self.eval_f(theta)?],
            h_basis: vec![self.eval_h(theta)?],
            q: self.q.clone(),
            r: self.r.clone(),
        })
    }

    pub fn eval_f(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        affine_combination(&self.f_basis, theta)
    }

    pub fn eval_h(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        affine_combination(&self.h_basis, theta)
    }
}

fn affine_combination(basis: &[DMatrix<f64>], theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    if theta.len() + 1 != basis.len() {
        return Err(Error::dim(format!(
            "theta has length {}, model has d = {}",
            theta.len(),
            basis.len() - 1
        )));
    }
    let mut out = basis[0].clone();
    for (t, b) in theta.iter().zip(&basis[1..]) {
        out += b * *t;
    }
    Ok(out)
}

/// Mean and covariance of a multivariate normal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::dim(format!(
                "mean has length {}, covariance is {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        if !is_psd(&cov) {
            return Err(Error::NotPositiveSemidefinite("covariance"));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let s = linalg::psd_sqrt(&self.cov);
        &self.mean + s * standard_normal(rng, self.dim())
    }
}

pub(crate) fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// States `x_0..x_N` (one column each) and measurements `y_1..y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub measurements: DMatrix<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.measurements.ncols()
    }
}

/// Draws `x_0` from `x0_draw` and runs the model for `steps` steps.
///
/// Draw order is `x_0`, then `v_k`, `e_{k+1}` interleaved per step, all from a
/// ChaCha8 stream seeded with `seed`.
pub fn simulate(
    model: &ParamAffineModel,
    theta_true: &DVector<f64>,
    x0_draw: &GaussianDensity,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    if x0_draw.dim() != model.n() {
        return Err(Error::dim("initial-state density does not match n"));
    }
    let f = model.eval_f(theta_true)?;
    let h = model.eval_h(theta_true)?;
    let sq = linalg::psd_sqrt(model.q());
    let sr = linalg::psd_sqrt(model.r());
    let (n, m) = (model.n(), model.m());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = DMatrix::zeros(n, steps + 1);
    let mut measurements = DMatrix::zeros(m, steps);
    let mut x = x0_draw.sample(&mut rng);
    states.set_column(0, &x);
    for k in 1..=steps {
        x = &f * &x + &sq * standard_normal(&mut rng, n);
        let y = &h * &x + &sr * standard_normal(&mut rng, m);
        states.set_column(k, &x);
        measurements.set_column(k - 1, &y);
    }
    Ok(Trajectory {
        states,
        measurements,
        seed,
    })
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solution `P` of `P = F P Fᵀ + Q` for `F = F(θ)`.
pub fn stationary_cov(model: &ParamAffineModel, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let f = model.eval_f(theta)?;
    let rho = spectral_radius(&f);
    if !(rho < 1.0) {
        return Err(Error::NonStationary(rho));
    }
    let n = model.n();
    // (I - F ⊗ F) vec(P) = vec(Q), column-major vec.
    let kron = f.kronecker(&f);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(model.q().as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Lyapunov system".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(linalg::symmetrize(&p))
}

#![allow(dead_code)]

use peiv_core::{DMatrix, DVector, GaussianDensity, ParamAffineModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = mat(rng, n, n, 1.0);
    &a * a.transpose() * 0.5 + DMatrix::identity(n, n) * floor
}

/// Random well-conditioned problem with roughly stable dynamics at `theta`.
pub struct Problem {
    pub model: ParamAffineModel,
    pub theta: DVector<f64>,
    pub y: DMatrix<f64>,
    pub prior: GaussianDensity,
}

pub fn problem(seed: u64, n: usize, m: usize, d: usize, steps: usize) -> Problem {
    let mut r = rng(seed);
    let f: Vec<_> = (0..=d)
        .map(|i| mat(&mut r, n, n, if i == 0 { 0.6 } else { 0.3 } / n as f64))
        .collect();
    let h: Vec<_> = (0..=d)
        .map(|i| mat(&mut r, m, n, if i == 0 { 1.0 } else { 0.3 }))
        .collect();
    let model = ParamAffineModel::new(f, h, spd(&mut r, n, 0.1), spd(&mut r, m, 0.1)).unwrap();
    let theta = vec(&mut r, d, 1.0);
    let y = mat(&mut r, m, steps, 2.0);
    let prior = GaussianDensity::new(vec(&mut r, n, 1.0), spd(&mut r, n, 0.2)).unwrap();
    Problem {
        model,
        theta,
        y,
        prior,
    }
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / (1.0 + b.abs().max())
}

/// `A ⊗ B` from the definition.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac, br, bc) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Column-stacking `vec`.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

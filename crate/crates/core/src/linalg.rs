//! Small dense helpers shared by the other modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Diagonal loading used when a noise covariance is singular.
pub const JITTER: f64 = 1e-12;

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Symmetric and no eigenvalue below `-1e-10 * max|m|`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if !is_symmetric(m, 1e-10) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.amax();
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().all(|&l| l >= -1e-10 * scale)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// Cholesky factorization, retrying once with [`JITTER`] on the diagonal.
/// The flag reports whether loading was needed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = cholesky(m) {
        return Some((c, false));
    }
    let n = m.nrows();
    cholesky(&(m + DMatrix::identity(n, n) * JITTER)).map(|c| (c, true))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| symmetrize(&c.inverse()))
}

/// A square root `S` with `S Sᵀ = m` for symmetric PSD `m` (Cholesky when
/// possible, eigen-decomposition otherwise).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = cholesky(m) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut v = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

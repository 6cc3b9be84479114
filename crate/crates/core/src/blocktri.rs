//! Symmetric block-tridiagonal matrices with equal `n x n` blocks.
//!
//! The smoother normal matrix `Ψᵀ Σ_η⁻¹ Ψ` has this structure, and so does
//! the part of its inverse needed by the EM expectations (marginal and lag-one
//! covariances).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// `diag[k]` is block `(k, k)`, `lower[k]` is block `(k + 1, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiag {
    pub diag: Vec<DMatrix<f64>>,
    pub lower: Vec<DMatrix<f64>>,
}

/// Lower block-bidiagonal Cholesky factor: `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BlockTridiagCholesky {
    diag: Vec<DMatrix<f64>>,
    lower: Vec<DMatrix<f64>>,
}

/// Block-tridiagonal part of a state covariance over `x_0..x_N`.
///
/// `marginals[k] = cov(x_k)`, `lag_one[k] = cov(x_k, x_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCovariance {
    pub marginals: Vec<DMatrix<f64>>,
    pub lag_one: Vec<DMatrix<f64>>,
}

impl BlockTridiag {
    pub fn zeros(blocks: usize, n: usize) -> Self {
        Self {
            diag: vec![DMatrix::zeros(n, n); blocks],
            lower: vec![DMatrix::zeros(n, n); blocks.saturating_sub(1)],
        }
    }

    pub fn block_count(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |b| b.nrows())
    }

    /// Adds `value` to block `(i, j)`; `|i - j| <= 1`. Only the lower copy of
    /// an off-diagonal pair is stored, so callers add each symmetric pair once
    /// through the lower (or upper, transposed) position.
    pub fn add_block(&mut self, i: usize, j: usize, value: &DMatrix<f64>) -> Result<()> {
        match i as isize - j as isize {
            0 => self.diag[i] += value,
            1 => self.lower[j] += value,
            -1 => self.lower[i] += value.transpose(),
            _ => {
                return Err(Error::IllPosed(format!(
                    "coupling between non-adjacent blocks ({i}, {j})"
                )))
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.block_size();
        let total = n * self.block_count();
        let mut out = DMatrix::zeros(total, total);
        for (k, d) in self.diag.iter().enumerate() {
            out.view_mut((k * n, k * n), (n, n)).copy_from(d);
        }
        for (k, l) in self.lower.iter().enumerate() {
            out.view_mut(((k + 1) * n, k * n), (n, n)).copy_from(l);
            out.view_mut((k * n, (k + 1) * n), (n, n))
                .copy_from(&l.transpose());
        }
        out
    }

    /// Block Cholesky sweep, `O(N n³)`.
    pub fn cholesky(&self) -> Result<BlockTridiagCholesky> {
        let count = self.block_count();
        let mut diag = Vec::with_capacity(count);
        let mut lower = Vec::with_capacity(count.saturating_sub(1));
        let mut schur = self.diag.first().cloned().unwrap_or_else(|| DMatrix::zeros(0, 0));
        for k in 0..count {
            let chol = linalg::cholesky(&schur).ok_or_else(|| {
                Error::IllPosed(format!("normal matrix not positive definite at block {k}"))
            })?;
            let lkk = chol.l();
            if k + 1 < count {
                // L_{k+1,k} = A_{k+1,k} L_kk⁻ᵀ, i.e. L_kk L_{k+1,k}ᵀ = A_{k+1,k}ᵀ
                let lt = lkk
                    .solve_lower_triangular(&self.lower[k].transpose())
                    .ok_or_else(|| Error::IllPosed("singular diagonal factor".into()))?;
                let l_next = lt.transpose();
                schur = &self.diag[k + 1] - &l_next * &lt;
                lower.push(l_next);
            }
            diag.push(lkk);
        }
        Ok(BlockTridiagCholesky { diag, lower })
    }
}

impl BlockTridiagCholesky {
    pub fn block_count(&self) -> usize {
        self.diag.len()
    }

    /// Solves `A x = rhs` for a stacked vector.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let count = self.block_count();
        let n = self.diag.first().map_or(0, |b| b.nrows());
        let mut z: Vec<DVector<f64>> = Vec::with_capacity(count);
        for k in 0..count {
            let mut b = rhs.rows(k * n, n).clone_owned();
            if k > 0 {
                b -= &self.lower[k - 1] * &z[k - 1];
            }
            let zk = self.diag[k]
                .solve_lower_triangular(&b)
                .expect("factor diagonal is nonsingular");
            z.push(zk);
        }
        let mut x = DVector::zeros(count * n);
        for k in (0..count).rev() {
            let mut b = z[k].clone();
            if k + 1 < count {
                b -= self.lower[k].transpose() * x.rows((k + 1) * n, n);
            }
            let xk = self.diag[k]
                .tr_solve_lower_triangular(&b)
                .expect("factor diagonal is nonsingular");
            x.rows_mut(k * n, n).copy_from(&xk);
        }
        x
    }

    pub fn log_det(&self) -> f64 {
        self.diag
            .iter()
            .map(|l| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .sum()
    }

    /// Diagonal and first off-diagonal blocks of `A⁻¹`, without forming the
    /// dense inverse.
    pub fn selected_inverse(&self) -> StateCovariance {
        let count = self.block_count();
        let n = self.diag.first().map_or(0, |b| b.nrows());
        let eye = DMatrix::<f64>::identity(n, n);
        let inv_diag: Vec<DMatrix<f64>> = self
            .diag
            .iter()
            .map(|l| {
                l.solve_lower_triangular(&eye)
                    .expect("factor diagonal is nonsingular")
            })
            .collect();

        let mut marginals = vec![DMatrix::zeros(n, n); count];
        let mut lag_one = vec![DMatrix::zeros(n, n); count.saturating_sub(1)];
        if count == 0 {
            return StateCovariance { marginals, lag_one };
        }
        // From Lᵀ Σ = L⁻¹ read off block row k for columns k and k+1.
        let last = count - 1;
        marginals[last] = linalg::symmetrize(&(inv_diag[last].transpose() * &inv_diag[last]));
        for k in (0..last).rev() {
            let lkinv_t = inv_diag[k].transpose();
            let upper = -&lkinv_t * self.lower[k].transpose() * &marginals[k + 1];
            let mkk = &lkinv_t * (&inv_diag[k] - self.lower[k].transpose() * upper.transpose());
            marginals[k] = linalg::symmetrize(&mkk);
            lag_one[k] = upper;
        }
        StateCovariance { marginals, lag_one }
    }
}

impl StateCovariance {
    pub fn zeros(blocks: usize, n: usize) -> Self {
        Self {
            marginals: vec![DMatrix::zeros(n, n); blocks],
            lag_one: vec![DMatrix::zeros(n, n); blocks.saturating_sub(1)],
        }
    }

    /// Block `(i, j)` of the covariance when `|i - j| <= 1`.
    pub fn block(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        match i as isize - j as isize {
            0 => self.marginals.get(i).cloned(),
            -1 => self.lag_one.get(i).cloned(),
            1 => self.lag_one.get(j).map(|b| b.transpose()),
            _ => None,
        }
    }
}

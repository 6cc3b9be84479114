//! The stacked regression `Ȳ = Ψ(θ) X + η` over a whole data window.
//!
//! Rows of `Ψ(θ)` come in three groups of row blocks:
//!
//! - `N` measurement blocks (`m` rows): `H(θ)` on state block `k` for `y_k`,
//!   `k = 1..N`; the first state block never appears here.
//! - `N` transition blocks (`n` rows): `F(θ)` on block `k`, `-I` on block
//!   `k + 1`, `k = 0..N-1`.
//! - one prior block (`n` rows): `I` on block 0.
//!
//! `Ψ(θ) = Ψ_base + Σ θ_i Ψ_i` is kept as one block-sparse base matrix plus
//! one block-sparse matrix per parameter. These stand in for the
//! vectorized form `vec(Ψ(θ)) = h + Bθ` and `D(X) = Xᵀ ⊗ I`, which are never
//! built: `D(X) B` has column `i` equal to `Ψ_i X`, and `D(X) h = Ψ_base X`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::blocktri::{BlockTridiag, StateCovariance};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GaussianDensity, ParamAffineModel};

/// Block geometry of a batch with `steps` measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
}

/// Which diagonal block of `Σ_η` weights a row block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Measurement,
    Transition,
    Prior,
}

impl Layout {
    pub fn row_blocks(&self) -> usize {
        2 * self.steps + 1
    }

    pub fn col_blocks(&self) -> usize {
        self.steps + 1
    }

    pub fn rows(&self) -> usize {
        self.steps * (self.m + self.n) + self.n
    }

    pub fn cols(&self) -> usize {
        self.n * self.col_blocks()
    }

    pub fn row_kind(&self, rb: usize) -> RowKind {
        if rb < self.steps {
            RowKind::Measurement
        } else if rb < 2 * self.steps {
            RowKind::Transition
        } else {
            RowKind::Prior
        }
    }

    pub fn row_offset(&self, rb: usize) -> usize {
        match self.row_kind(rb) {
            RowKind::Measurement => rb * self.m,
            RowKind::Transition => self.steps * self.m + (rb - self.steps) * self.n,
            RowKind::Prior => self.steps * (self.m + self.n),
        }
    }

    pub fn row_size(&self, rb: usize) -> usize {
        match self.row_kind(rb) {
            RowKind::Measurement => self.m,
            _ => self.n,
        }
    }

    pub fn col_offset(&self, cb: usize) -> usize {
        cb * self.n
    }
}

/// Sparse matrix made of dense blocks keyed by `(row block, column block)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparse {
    layout: Layout,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl BlockSparse {
    pub fn new(layout: Layout) -> Self {
        Self {
            layout,
            blocks: BTreeMap::new(),
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Adds into block `(rb, cb)`; all-zero values are not stored.
    pub fn add(&mut self, rb: usize, cb: usize, value: DMatrix<f64>) {
        debug_assert_eq!(value.nrows(), self.layout.row_size(rb));
        debug_assert_eq!(value.ncols(), self.layout.n);
        match self.blocks.get_mut(&(rb, cb)) {
            Some(b) => *b += value,
            None if value.iter().any(|v| *v != 0.0) => {
                self.blocks.insert((rb, cb), value);
            }
            None => {}
        }
    }

    pub fn get(&self, rb: usize, cb: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(rb, cb))
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Blocks of one row block, ordered by column block.
    pub fn row(&self, rb: usize) -> impl Iterator<Item = (usize, &DMatrix<f64>)> {
        self.blocks
            .range((rb, 0)..(rb + 1, 0))
            .map(|(&(_, cb), b)| (cb, b))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &DMatrix<f64>)> {
        self.blocks.iter().map(|(&k, b)| (k, b))
    }

    pub fn scaled_add(&mut self, other: &BlockSparse, alpha: f64) {
        if alpha == 0.0 {
            return;
        }
        for (&(rb, cb), b) in &other.blocks {
            self.add(rb, cb, b * alpha);
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let l = self.layout;
        let mut out = DVector::zeros(l.rows());
        for (&(rb, cb), b) in &self.blocks {
            let xs = x.rows(l.col_offset(cb), l.n);
            let mut rows = out.rows_mut(l.row_offset(rb), l.row_size(rb));
            rows.gemv(1.0, b, &xs, 1.0);
        }
        out
    }

    /// `selfᵀ v`.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let l = self.layout;
        let mut out = DVector::zeros(l.cols());
        for (&(rb, cb), b) in &self.blocks {
            let vs = v.rows(l.row_offset(rb), l.row_size(rb));
            let mut cols = out.rows_mut(l.col_offset(cb), l.n);
            cols.gemv_tr(1.0, b, &vs, 1.0);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let l = self.layout;
        let mut out = DMatrix::zeros(l.rows(), l.cols());
        for (&(rb, cb), b) in &self.blocks {
            out.view_mut((l.row_offset(rb), l.col_offset(cb)), b.shape())
                .copy_from(b);
        }
        out
    }
}

/// Assembled regression for one data window.
#[derive(Debug, Clone)]
pub struct BatchSystem {
    layout: Layout,
    d: usize,
    ybar: DVector<f64>,
    r_inv: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    p0_inv: DMatrix<f64>,
    psi_base: BlockSparse,
    psi_basis: Vec<BlockSparse>,
    jittered: bool,
}

/// Builds `Ȳ = [Y; 0; m₀]`, `Σ_η⁻¹ = diag(R⁻¹.., Q⁻¹.., P₀⁻¹)` and the
/// affine pieces of `Ψ(θ)`. `y` is `m x N`; `N = 0` leaves only the prior row.
pub fn assemble(
    model: &ParamAffineModel,
    y: &DMatrix<f64>,
    prior: &GaussianDensity,
) -> Result<BatchSystem> {
    let (n, m, d) = (model.n(), model.m(), model.d());
    if prior.dim() != n {
        return Err(Error::dim(format!(
            "state prior has dimension {}, model has n = {n}",
            prior.dim()
        )));
    }
    let steps = y.ncols();
    if steps > 0 && y.nrows() != m {
        return Err(Error::dim(format!(
            "measurements have {} rows, model has m = {m}",
            y.nrows()
        )));
    }
    let layout = Layout { n, m, steps };

    let mut jittered = false;
    let mut inverse = |mat: &DMatrix<f64>, what: &'static str| -> Result<DMatrix<f64>> {
        let (c, j) = linalg::cholesky_jittered(mat).ok_or(Error::NotPositiveSemidefinite(what))?;
        jittered |= j;
        Ok(linalg::symmetrize(&c.inverse()))
    };
    let r_inv = inverse(model.r(), "R")?;
    let q_inv = inverse(model.q(), "Q")?;
    let p0_inv = inverse(&prior.cov, "P0")?;

    let mut ybar = DVector::zeros(layout.rows());
    for k in 0..steps {
        ybar.rows_mut(layout.row_offset(k), m).copy_from(&y.column(k));
    }
    ybar.rows_mut(layout.row_offset(2 * steps), n)
        .copy_from(&prior.mean);

    let place = |f: &DMatrix<f64>, h: &DMatrix<f64>, base: bool| {
        let mut s = BlockSparse::new(layout);
        for k in 0..steps {
            s.add(k, k + 1, h.clone());
            s.add(steps + k, k, f.clone());
            if base {
                s.add(steps + k, k + 1, -DMatrix::identity(n, n));
            }
        }
        if base {
            s.add(2 * steps, 0, DMatrix::identity(n, n));
        }
        s
    };
    let psi_base = place(&model.f_basis()[0], &model.h_basis()[0], true);
    let psi_basis = (1..=d)
        .map(|i| place(&model.f_basis()[i], &model.h_basis()[i], false))
        .collect();

    Ok(BatchSystem {
        layout,
        d,
        ybar,
        r_inv,
        q_inv,
        p0_inv,
        psi_base,
        psi_basis,
        jittered,
    })
}

impl BatchSystem {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn steps(&self) -> usize {
        self.layout.steps
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ybar(&self) -> &DVector<f64> {
        &self.ybar
    }

    pub fn psi_base(&self) -> &BlockSparse {
        &self.psi_base
    }

    pub fn psi_basis(&self) -> &[BlockSparse] {
        &self.psi_basis
    }

    /// True when a noise or prior covariance needed diagonal loading.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// Diagonal block of `Σ_η⁻¹` for row block `rb`.
    pub fn weight(&self, rb: usize) -> &DMatrix<f64> {
        match self.layout.row_kind(rb) {
            RowKind::Measurement => &self.r_inv,
            RowKind::Transition => &self.q_inv,
            RowKind::Prior => &self.p0_inv,
        }
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.d {
            return Err(Error::dim(format!(
                "theta has length {}, expected {}",
                theta.len(),
                self.d
            )));
        }
        Ok(())
    }

    fn check_states(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.layout.cols() {
            return Err(Error::dim(format!(
                "state stack has length {}, expected {}",
                x.len(),
                self.layout.cols()
            )));
        }
        Ok(())
    }

    pub fn psi(&self, theta: &DVector<f64>) -> Result<BlockSparse> {
        self.check_theta(theta)?;
        let mut out = self.psi_base.clone();
        for (t, b) in theta.iter().zip(&self.psi_basis) {
            out.scaled_add(b, *t);
        }
        Ok(out)
    }

    /// `Ψ(θ) X`.
    pub fn apply_psi(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_states(x)?;
        let (phi, c) = self.regressor_phi(x)?;
        self.check_theta(theta)?;
        Ok(phi * theta + c)
    }

    /// `Φ(X)` (column `i` is `Ψ_i X`) and `c(X) = Ψ_base X`.
    pub fn regressor_phi(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_states(x)?;
        let c = self.psi_base.mul_vec(x);
        let mut phi = DMatrix::zeros(self.layout.rows(), self.d);
        for (i, b) in self.psi_basis.iter().enumerate() {
            phi.set_column(i, &b.mul_vec(x));
        }
        Ok((phi, c))
    }

    /// `Σ_η⁻¹ v`.
    pub fn weighted(&self, v: &DVector<f64>) -> DVector<f64> {
        let l = self.layout;
        let mut out = DVector::zeros(v.len());
        for rb in 0..l.row_blocks() {
            let (o, s) = (l.row_offset(rb), l.row_size(rb));
            out.rows_mut(o, s).copy_from(&(self.weight(rb) * v.rows(o, s)));
        }
        out
    }

    /// `Σ_η⁻¹ M` column by column.
    pub fn weighted_columns(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(mat.nrows(), mat.ncols());
        for j in 0..mat.ncols() {
            out.set_column(j, &self.weighted(&mat.column(j).clone_owned()));
        }
        out
    }

    pub fn weighted_norm_sq(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.weighted(v))
    }

    /// `‖Ȳ - Ψ(θ) X‖²` in the `Σ_η⁻¹` norm.
    pub fn cost(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r = &self.ybar - self.apply_psi(theta, x)?;
        Ok(self.weighted_norm_sq(&r))
    }

    /// Normal matrix `Ψ(θ)ᵀ Σ_η⁻¹ Ψ(θ)` and right-hand side `Ψ(θ)ᵀ Σ_η⁻¹ Ȳ`.
    pub fn normal_equations(&self, theta: &DVector<f64>) -> Result<(BlockTridiag, DVector<f64>)> {
        let psi = self.psi(theta)?;
        let l = self.layout;
        let mut normal = BlockTridiag::zeros(l.col_blocks(), l.n);
        for rb in 0..l.row_blocks() {
            let w = self.weight(rb);
            let entries: Vec<_> = psi.row(rb).collect();
            for &(ci, bi) in &entries {
                for &(cj, bj) in &entries {
                    if ci >= cj {
                        normal.add_block(ci, cj, &(bi.transpose() * w * bj))?;
                    }
                }
            }
        }
        let rhs = psi.tr_mul_vec(&self.weighted(&self.ybar));
        Ok((normal, rhs))
    }

    /// `tr(Aᵀ Σ_η⁻¹ B Σ_X)` using only the block-tridiagonal part of `Σ_X`.
    pub fn weighted_trace(
        &self,
        a: &BlockSparse,
        b: &BlockSparse,
        cov: &StateCovariance,
    ) -> Result<f64> {
        let mut total = 0.0;
        for rb in 0..self.layout.row_blocks() {
            let w = self.weight(rb);
            for (ca, ba) in a.row(rb) {
                let wa = w * ba;
                for (cb, bb) in b.row(rb) {
                    let sigma = cov.block(cb, ca).ok_or_else(|| {
                        Error::IllPosed(format!("trace needs covariance block ({cb}, {ca})"))
                    })?;
                    // tr(baᵀ W bb Σ_{cb,ca}) = Σ_ij (W ba)_ij (bb Σ_{cb,ca})_ij
                    total += wa.component_mul(&(bb * sigma)).sum();
                }
            }
        }
        Ok(total)
    }

    pub fn sigma_eta_inv_dense(&self) -> DMatrix<f64> {
        let l = self.layout;
        let mut out = DMatrix::zeros(l.rows(), l.rows());
        for rb in 0..l.row_blocks() {
            let (o, s) = (l.row_offset(rb), l.row_size(rb));
            out.view_mut((o, o), (s, s)).copy_from(self.weight(rb));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_system(y1: f64, m0: f64) -> BatchSystem {
        let model = ParamAffineModel::scalar_ar1(0.2, 0.09).unwrap();
        let y = DMatrix::from_element(1, 1, y1);
        assemble(&model, &y, &GaussianDensity::scalar(m0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn scalar_single_step_layout() {
        let sys = scalar_system(0.5, -0.25);
        let theta = DVector::from_element(1, 0.9);
        let psi = sys.psi(&theta).unwrap().to_dense();
        assert_eq!(psi, DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.9, -1.0, 1.0, 0.0]));
        assert_eq!(sys.ybar().as_slice(), &[0.5, 0.0, -0.25]);
        assert_eq!(
            sys.psi_base().to_dense(),
            DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, -1.0, 1.0, 0.0])
        );
        assert_eq!(
            sys.psi_basis()[0].to_dense(),
            DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
        );
    }

    #[test]
    fn scalar_apply_and_regressor() {
        let sys = scalar_system(0.5, 0.0);
        let x = DVector::from_vec(vec![2.0, 3.0]);
        let out = sys.apply_psi(&DVector::from_element(1, 0.9), &x).unwrap();
        let expect = [3.0, -1.2, 2.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let base = sys.apply_psi(&DVector::zeros(1), &x).unwrap();
        assert_eq!(base, sys.psi_base().mul_vec(&x));

        let (phi, c) = sys.regressor_phi(&x).unwrap();
        assert_eq!(phi.as_slice(), &[0.0, 2.0, 0.0]);
        assert_eq!(c.as_slice(), &[3.0, -3.0, 2.0]);
        let (phi0, c0) = sys.regressor_phi(&DVector::zeros(2)).unwrap();
        assert_eq!(phi0.amax(), 0.0);
        assert_eq!(c0.amax(), 0.0);
    }

    #[test]
    fn length_mismatches_are_errors() {
        let sys = scalar_system(0.5, 0.0);
        assert!(sys.apply_psi(&DVector::zeros(1), &DVector::zeros(3)).is_err());
        assert!(sys.apply_psi(&DVector::zeros(2), &DVector::zeros(2)).is_err());
        assert!(sys.regressor_phi(&DVector::zeros(1)).is_err());
        let model = ParamAffineModel::scalar_ar1(0.2, 0.09).unwrap();
        let y = DMatrix::zeros(2, 3);
        assert!(assemble(&model, &y, &GaussianDensity::scalar(0.0, 1.0).unwrap()).is_err());
    }

    /// Builds Ψ(θ) entry by entry from F(θ), H(θ).
    fn dense_psi(model: &ParamAffineModel, theta: &DVector<f64>, steps: usize) -> DMatrix<f64> {
        let (n, m) = (model.n(), model.m());
        let f = model.eval_f(theta).unwrap();
        let h = model.eval_h(theta).unwrap();
        let rows = steps * m + steps * n + n;
        let mut out = DMatrix::zeros(rows, n * (steps + 1));
        for k in 1..=steps {
            for i in 0..m {
                for j in 0..n {
                    out[((k - 1) * m + i, k * n + j)] = h[(i, j)];
                }
            }
        }
        for k in 0..steps {
            for i in 0..n {
                for j in 0..n {
                    out[(steps * m + k * n + i, k * n + j)] = f[(i, j)];
                }
                out[(steps * m + k * n + i, (k + 1) * n + i)] = -1.0;
            }
        }
        for i in 0..n {
            out[(steps * (m + n) + i, i)] = 1.0;
        }
        out
    }

    #[test]
    fn assembled_psi_matches_dense_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, d, steps) = (2, 2, 2, 3);
        let mut mat = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let model = ParamAffineModel::new(
            (0..=d).map(|_| mat(n, n)).collect(),
            (0..=d).map(|_| mat(m, n)).collect(),
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
        )
        .unwrap();
        let y = mat(m, steps);
        let prior = GaussianDensity::new(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        let sys = assemble(&model, &y, &prior).unwrap();
        let theta = DVector::from_vec(vec![0.3, -0.8]);
        let got = sys.psi(&theta).unwrap().to_dense();
        assert!((got - dense_psi(&model, &theta, steps)).amax() < 1e-14);
    }

    #[test]
    fn normal_equations_match_dense_products() {
        let model = ParamAffineModel::scalar_ar1(0.2, 0.09).unwrap();
        let y = DMatrix::from_row_slice(1, 4, &[0.3, -0.1, 0.7, 1.1]);
        let sys = assemble(&model, &y, &GaussianDensity::scalar(0.2, 2.0).unwrap()).unwrap();
        let theta = DVector::from_element(1, 0.85);
        let (normal, rhs) = sys.normal_equations(&theta).unwrap();
        let psi = sys.psi(&theta).unwrap().to_dense();
        let w = sys.sigma_eta_inv_dense();
        let dn = psi.transpose() * &w * &psi;
        let dr = psi.transpose() * &w * sys.ybar();
        assert!((normal.to_dense() - dn).amax() < 1e-12);
        assert!((rhs - dr).amax() < 1e-12);
    }

    #[test]
    fn n_zero_batch_is_prior_only() {
        let model = ParamAffineModel::scalar_ar1(0.2, 0.09).unwrap();
        let sys = assemble(
            &model,
            &DMatrix::zeros(1, 0),
            &GaussianDensity::scalar(0.4, 2.0).unwrap(),
        )
        .unwrap();
        assert_eq!(sys.layout().rows(), 1);
        assert_eq!(sys.psi_base().to_dense(), DMatrix::identity(1, 1));
        assert!(sys.psi_basis()[0].is_empty());
    }
}

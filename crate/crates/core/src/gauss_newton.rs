//! Matrix-free empirical Gauss-Newton operator.
//!
//! The operator on the horizontal space is
//!
//! ```text
//! A(z) = (1/m) sum_{i,j} xi_ij <xi_ij, z> + lambda z,
//! xi_ij = P Dtau^*[w_ij (x) Phi(x^i)],
//! ```
//!
//! where `w_ij` are the weight factors of sample `i` (all `n_0` of them, or a
//! single drawn one). On every node `k` the block of `xi_ij` is the rank-one
//! matrix `a_ik u_ijk^T`: `a_ik` is the projected Khatri-Rao row of the
//! node's children states, shared by all `j`, and `u_ijk` is the cotangent
//! reaching node `k` from `w_ij`. Factors are kept in this split form, which
//! is exact and lets every block be applied without forming `xi_ij`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{dim_err, FtnError, Result};
use crate::features::FeatureBatch;
use crate::geometry::HorizontalTangent;
use crate::kernels::{khatri_rao, DenseTensor};
use crate::losses::{gn_weight_factors, sample_gn_weight_factor, LossKind};
use crate::model::{chunk_ranges, TangentTuple, TtnParams};

/// Default regularization.
pub const DEFAULT_LAMBDA: f64 = 5e-3;
/// Default relative residual tolerance for CG.
pub const DEFAULT_CG_TOL: f64 = 1e-6;
/// Default CG iteration cap.
pub const DEFAULT_CG_MAX_ITER: usize = 250;

/// How many weight factors enter per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMode {
    /// All `n_0` factors: the exact empirical operator.
    Full,
    /// One factor drawn per sample: an unbiased estimate.
    OneShot,
}

/// Which operator a CG solve uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Full,
    /// Independent solves with the diagonal blocks.
    BlockDiagonal,
}

#[derive(Debug, Clone)]
struct FactorBlock {
    /// `m x (r_L r_R)`: projected Khatri-Rao rows, one per sample.
    left: Array2<f64>,
    /// `(m * per_sample) x r_t`: cotangent rows, sample-major.
    cot: Array2<f64>,
}

/// The factors `xi_ij` of the empirical operator at a base point.
#[derive(Debug, Clone)]
pub struct GnFactorSet {
    shapes: Vec<[usize; 3]>,
    samples: usize,
    per_sample: usize,
    lambda: f64,
    blocks: Vec<FactorBlock>,
}

/// Outcome of a conjugate gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final residual norm relative to the right-hand side.
    pub relative_residual: f64,
    pub converged: bool,
}

impl GnFactorSet {
    /// Computes the factors for every sample of `batch` at `params`.
    pub fn assemble<R: Rng + ?Sized>(
        params: &TtnParams,
        batch: &FeatureBatch,
        kind: LossKind,
        mode: FactorMode,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(FtnError::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        let topo = params.topology();
        let n0 = topo.output_dim();
        let root = topo.root();
        let per_sample = match mode {
            FactorMode::Full => n0,
            FactorMode::OneShot => 1,
        };
        let ranges = chunk_ranges(batch.len());
        let sweeps = ranges
            .par_iter()
            .map(|&(s, e)| params.sweep(&batch.slice(s, e)))
            .collect::<Result<Vec<_>>>()?;

        // Weight factors are drawn sequentially so one-shot sampling does not
        // depend on the worker count.
        let mut roots: Vec<Array2<f64>> = Vec::with_capacity(sweeps.len());
        for sweep in &sweeps {
            let z = &sweep.states[root];
            let mut v = Array2::<f64>::zeros((z.nrows() * per_sample, n0));
            for (i, zi) in z.rows().into_iter().enumerate() {
                let ws = match mode {
                    FactorMode::Full => gn_weight_factors(kind, zi),
                    FactorMode::OneShot => vec![sample_gn_weight_factor(kind, zi, rng)],
                };
                for (j, w) in ws.into_iter().enumerate() {
                    v.row_mut(i * per_sample + j).assign(&Array1::from(w));
                }
            }
            roots.push(v);
        }

        let parts = sweeps
            .into_par_iter()
            .zip(roots.into_par_iter())
            .map(|(sweep, v)| {
                let rows: Vec<usize> = (0..sweep.rows() * per_sample).map(|r| r / per_sample).collect();
                let cot = params.top_down(&sweep.expanded(&rows), v)?;
                topo.nodes()
                    .iter()
                    .enumerate()
                    .zip(cot)
                    .map(|((k, node), cot)| {
                        let mut left = khatri_rao(sweep.input(node.left), sweep.input(node.right))?;
                        if k != root {
                            let a = params.core(k).unfold();
                            left -= &left.dot(&a).dot(&a.t());
                        }
                        Ok(FactorBlock { left, cot })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let blocks = (0..topo.node_count())
            .map(|k| {
                let lefts: Vec<_> = parts.iter().map(|p| p[k].left.view()).collect();
                let cots: Vec<_> = parts.iter().map(|p| p[k].cot.view()).collect();
                let shape = topo.core_shape(k);
                Ok(FactorBlock {
                    left: concat_or_empty(&lefts, shape[0] * shape[1])?,
                    cot: concat_or_empty(&cots, shape[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let fs = Self {
            shapes: (0..topo.node_count()).map(|k| topo.core_shape(k)).collect(),
            samples: batch.len(),
            per_sample,
            lambda,
            blocks,
        };
        if fs.blocks.iter().any(|b| !b.left.iter().chain(b.cot.iter()).all(|v| v.is_finite())) {
            return Err(FtnError::NonFinite("Gauss-Newton factors".into()));
        }
        Ok(fs)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn factor_count(&self) -> usize {
        self.samples * self.per_sample
    }

    pub fn node_count(&self) -> usize {
        self.shapes.len()
    }

    /// Factor `(i, j)` as a full tangent tuple.
    pub fn factor(&self, i: usize, j: usize) -> HorizontalTangent {
        let row = i * self.per_sample + j;
        let blocks = self
            .blocks
            .iter()
            .zip(&self.shapes)
            .map(|(b, shape)| {
                let a = b.left.row(i);
                let u = b.cot.row(row);
                let data: Vec<f64> = a.iter().flat_map(|&x| u.iter().map(move |&y| x * y)).collect();
                DenseTensor::new(shape.to_vec(), data).expect("factor shape")
            })
            .collect();
        HorizontalTangent::new_unchecked(TangentTuple::new(blocks))
    }

    fn check(&self, z: &TangentTuple) -> Result<()> {
        if z.blocks().len() != self.shapes.len()
            || z.blocks().iter().zip(&self.shapes).any(|(b, s)| b.shape() != s)
        {
            return dim_err("tangent does not match the factor set's base point");
        }
        Ok(())
    }

    /// `<xi_ij, z>` restricted to node `k`, for every factor row.
    fn block_products(&self, k: usize, zk: ArrayView2<'_, f64>) -> Array1<f64> {
        let block = &self.blocks[k];
        let b = block.left.dot(&zk);
        let mut s = Array1::<f64>::zeros(block.cot.nrows());
        for (row, (u, out)) in block.cot.rows().into_iter().zip(s.iter_mut()).enumerate() {
            *out = u.dot(&b.row(row / self.per_sample));
        }
        s
    }

    /// `(1/m) sum_ij xi_ijk s_ij` for given per-factor weights `s`.
    fn block_combine(&self, k: usize, s: &Array1<f64>) -> Array2<f64> {
        let block = &self.blocks[k];
        let r = block.cot.ncols();
        let mut c = Array2::<f64>::zeros((self.samples, r));
        for (row, u) in block.cot.rows().into_iter().enumerate() {
            let mut ci = c.row_mut(row / self.per_sample);
            let w = s[row];
            Zip::from(&mut ci).and(&u).for_each(|c, &u| *c += w * u);
        }
        let mut out = block.left.t().dot(&c);
        if self.samples > 0 {
            out /= self.samples as f64;
        }
        out
    }

    /// Applies the node-`k` diagonal block (including `lambda`) to a matrix
    /// shaped like the node's unfolding.
    pub fn apply_block(&self, k: usize, zk: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let [a, b, c] = self.shapes[k];
        if zk.dim() != (a * b, c) {
            return dim_err("block shape mismatch");
        }
        let s = self.block_products(k, zk);
        let mut out = self.block_combine(k, &s);
        out.scaled_add(self.lambda, &zk);
        Ok(out)
    }

    /// The full operator `(1/m) sum xi <xi, z> + lambda z`.
    pub fn apply(&self, z: &HorizontalTangent) -> Result<HorizontalTangent> {
        self.check(z.tangent())?;
        let n = self.shapes.len();
        let partial: Vec<Array1<f64>> = (0..n)
            .into_par_iter()
            .map(|k| self.block_products(k, z.block(k).unfold()))
            .collect();
        let mut s = Array1::<f64>::zeros(self.factor_count());
        for p in &partial {
            s += p;
        }
        let blocks = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut out = self.block_combine(k, &s);
                out.scaled_add(self.lambda, &z.block(k).unfold());
                DenseTensor::from_unfolding(&self.shapes[k][..2], out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HorizontalTangent::new_unchecked(TangentTuple::new(blocks)))
    }

    /// The block-diagonal part of [`GnFactorSet::apply`].
    pub fn apply_block_diag(&self, z: &HorizontalTangent) -> Result<HorizontalTangent> {
        self.check(z.tangent())?;
        let blocks = (0..self.shapes.len())
            .into_par_iter()
            .map(|k| {
                let out = self.apply_block(k, z.block(k).unfold())?;
                DenseTensor::from_unfolding(&self.shapes[k][..2], out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HorizontalTangent::new_unchecked(TangentTuple::new(blocks)))
    }

    /// Solves `A z = rhs` by conjugate gradients, with either the full
    /// operator or independent per-block solves.
    pub fn cg_solve(
        &self,
        operator: OperatorKind,
        rhs: &HorizontalTangent,
        tol: f64,
        max_iter: usize,
    ) -> Result<(HorizontalTangent, CgReport)> {
        self.check(rhs.tangent())?;
        match operator {
            OperatorKind::Full => conjugate_gradient(|x| self.apply(x), rhs, tol, max_iter),
            OperatorKind::BlockDiagonal => {
                let solved = (0..self.shapes.len())
                    .into_par_iter()
                    .map(|k| {
                        let b = rhs.block(k).unfold().to_owned();
                        conjugate_gradient(|x: &Array2<f64>| self.apply_block(k, x.view()), &b, tol, max_iter)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut report = CgReport {
                    iterations: 0,
                    relative_residual: 0.0,
                    converged: true,
                };
                let mut blocks = Vec::with_capacity(solved.len());
                for (k, (x, r)) in solved.into_iter().enumerate() {
                    report.iterations = report.iterations.max(r.iterations);
                    report.relative_residual = report.relative_residual.max(r.relative_residual);
                    report.converged &= r.converged;
                    blocks.push(DenseTensor::from_unfolding(&self.shapes[k][..2], x)?);
                }
                Ok((HorizontalTangent::new_unchecked(TangentTuple::new(blocks)), report))
            }
        }
    }

    /// Rayleigh quotient of block `k` after `power_iters` power iterations
    /// started at `init`.
    pub fn block_max_eig(&self, k: usize, init: ArrayView2<'_, f64>, power_iters: usize) -> Result<f64> {
        let norm = init.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(FtnError::InvalidArgument("power iteration needs a nonzero start".into()));
        }
        let mut x = init.to_owned() / norm;
        for _ in 0..power_iters {
            let y = self.apply_block(k, x.view())?;
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ny == 0.0 {
                return Ok(0.0);
            }
            x = y / ny;
        }
        let ax = self.apply_block(k, x.view())?;
        Ok((&x * &ax).sum())
    }
}

fn concat_or_empty(parts: &[ArrayView2<'_, f64>], cols: usize) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, cols)));
    }
    ndarray::concatenate(Axis(0), parts).map_err(|e| FtnError::Dimension(e.to_string()))
}

/// Vectors CG can work with.
pub trait KrylovVector: Clone {
    fn dot(&self, other: &Self) -> f64;
    /// `self += c * other`.
    fn axpy(&mut self, c: f64, other: &Self);
    fn scale(&mut self, c: f64);
    fn zeros_like(&self) -> Self;
}

impl KrylovVector for HorizontalTangent {
    fn dot(&self, other: &Self) -> f64 {
        self.tangent().blocks().iter().zip(other.tangent().blocks()).map(|(a, b)| a.dot(b)).sum()
    }

    fn axpy(&mut self, c: f64, other: &Self) {
        HorizontalTangent::axpy(self, c, other)
    }

    fn scale(&mut self, c: f64) {
        HorizontalTangent::scale(self, c)
    }

    fn zeros_like(&self) -> Self {
        self.scaled(0.0)
    }
}

impl KrylovVector for Array2<f64> {
    fn dot(&self, other: &Self) -> f64 {
        (self * other).sum()
    }

    fn axpy(&mut self, c: f64, other: &Self) {
        self.scaled_add(c, other)
    }

    fn scale(&mut self, c: f64) {
        self.mapv_inplace(|v| v * c)
    }

    fn zeros_like(&self) -> Self {
        Array2::zeros(self.dim())
    }
}

/// Plain conjugate gradients from a zero start. Stops when the residual norm
/// drops to `tol * |rhs|` or after `max_iter` iterations; running out of
/// iterations is reported in the [`CgReport`], not as an error.
pub fn conjugate_gradient<V, F>(mut op: F, rhs: &V, tol: f64, max_iter: usize) -> Result<(V, CgReport)>
where
    V: KrylovVector,
    F: FnMut(&V) -> Result<V>,
{
    let bnorm = rhs.dot(rhs).sqrt();
    if !bnorm.is_finite() {
        return Err(FtnError::NonFinite("CG right-hand side".into()));
    }
    let mut x = rhs.zeros_like();
    if bnorm == 0.0 {
        return Ok((x, CgReport { iterations: 0, relative_residual: 0.0, converged: true }));
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut it = 0;
    while it < max_iter {
        let ap = op(&p)?;
        let pap = p.dot(&ap);
        if !pap.is_finite() {
            return Err(FtnError::NonFinite("CG curvature".into()));
        }
        if pap <= 0.0 {
            return Err(FtnError::Degenerate("operator is not positive definite".into()));
        }
        let alpha = rs / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        it += 1;
        let rs_new = r.dot(&r);
        if !rs_new.is_finite() {
            return Err(FtnError::NonFinite("CG residual".into()));
        }
        if rs_new.sqrt() <= tol * bnorm {
            rs = rs_new;
            break;
        }
        let beta = rs_new / rs;
        p.scale(beta);
        p.axpy(1.0, &r);
        rs = rs_new;
    }
    let rel = rs.sqrt() / bnorm;
    if it == max_iter && rel > tol {
        log::warn!("CG stopped after {max_iter} iterations, relative residual {rel:.3e}");
    }
    Ok((x, CgReport { iterations: it, relative_residual: rel, converged: rel <= tol }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{eval_features, FeatureFamily};
    use crate::geometry::horizontal_project;
    use crate::losses::weight_matrix;
    use crate::random::seeded;
    use crate::topology::{BondDims, TreeTopology};
    use approx::assert_abs_diff_eq;

    fn setup(d: usize, n0: usize, m: usize, seed: u64) -> (TtnParams, FeatureBatch) {
        let topo = TreeTopology::requested(&vec![2; d], n0, &BondDims::Uniform(2))
            .unwrap()
            .clamp_bond_dims();
        let fam = FeatureFamily::Legendre { degree: 1 };
        let mut rng = seeded(seed);
        let probe = eval_features(&fam, Array2::from_shape_fn((64, d), |_| rng.gen_range(-1.0..1.0)).view()).unwrap();
        let batch = eval_features(&fam, Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0)).view()).unwrap();
        (TtnParams::random_init(&topo, &probe, seed).unwrap(), batch)
    }

    fn random_horizontal(params: &TtnParams, seed: u64) -> HorizontalTangent {
        let mut rng = seeded(seed);
        let t = TangentTuple::new(
            params
                .cores()
                .iter()
                .map(|c| DenseTensor::new(c.shape().to_vec(), (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect(),
        );
        horizontal_project(params, &t).unwrap()
    }

    /// Dense `P (1/m sum J_i^T Delta_i J_i) P + lambda P` from per-sample
    /// Jacobians of the forward map.
    fn dense_operator(params: &TtnParams, batch: &FeatureBatch, kind: LossKind, lambda: f64) -> Array2<f64> {
        let zero = TangentTuple::zeros_like(params);
        let dim = zero.flatten().len();
        let outputs = params.forward(batch).unwrap();
        let n0 = outputs.ncols();
        let mut proj = Array2::<f64>::zeros((dim, dim));
        let mut jac = vec![Array2::<f64>::zeros((n0, dim)); batch.len()];
        for col in 0..dim {
            let mut e = vec![0.0; dim];
            e[col] = 1.0;
            let t = TangentTuple::unflatten(&zero, &e).unwrap();
            let p = horizontal_project(params, &t).unwrap();
            proj.column_mut(col).assign(&Array1::from(p.tangent().flatten()));
            let j = params.apply_dtau(batch, &t).unwrap();
            for i in 0..batch.len() {
                jac[i].column_mut(col).assign(&j.row(i));
            }
        }
        let mut gn = Array2::<f64>::zeros((dim, dim));
        for (i, ji) in jac.iter().enumerate() {
            let delta = weight_matrix(kind, outputs.row(i));
            gn += &ji.t().dot(&delta).dot(ji);
        }
        gn /= batch.len() as f64;
        proj.dot(&gn).dot(&proj) + &proj * lambda
    }

    fn densify(params: &TtnParams, mut op: impl FnMut(&HorizontalTangent) -> HorizontalTangent) -> Array2<f64> {
        let zero = TangentTuple::zeros_like(params);
        let dim = zero.flatten().len();
        let mut out = Array2::<f64>::zeros((dim, dim));
        for col in 0..dim {
            let mut e = vec![0.0; dim];
            e[col] = 1.0;
            let p = horizontal_project(params, &TangentTuple::unflatten(&zero, &e).unwrap()).unwrap();
            out.column_mut(col).assign(&Array1::from(op(&p).tangent().flatten()));
        }
        out
    }

    #[test]
    fn single_sample_least_squares_matches_dense() {
        let (params, batch) = setup(2, 3, 1, 1);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::LeastSquares, FactorMode::Full, 0.0, &mut seeded(0)).unwrap();
        let dense = dense_operator(&params, &batch, LossKind::LeastSquares, 0.0);
        let fast = densify(&params, |z| fs.apply(z).unwrap());
        assert_abs_diff_eq!(fast, dense, epsilon = 1e-10);
    }

    #[test]
    fn full_operator_matches_dense_for_both_losses() {
        let (params, batch) = setup(4, 2, 8, 2);
        for kind in [LossKind::LeastSquares, LossKind::MultinomialLogistic] {
            let fs = GnFactorSet::assemble(&params, &batch, kind, FactorMode::Full, 0.01, &mut seeded(0)).unwrap();
            let dense = dense_operator(&params, &batch, kind, 0.01);
            let fast = densify(&params, |z| fs.apply(z).unwrap());
            assert_abs_diff_eq!(fast, dense, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_features_give_scaled_projection() {
        let (params, batch) = setup(4, 2, 3, 3);
        let zero_batch = FeatureBatch::new(batch.modes().iter().map(|a| Array2::zeros(a.dim())).collect()).unwrap();
        let fs = GnFactorSet::assemble(&params, &zero_batch, LossKind::LeastSquares, FactorMode::Full, 0.5, &mut seeded(0)).unwrap();
        let z = random_horizontal(&params, 4);
        let out = fs.apply(&z).unwrap();
        assert_abs_diff_eq!(
            Array1::from(out.tangent().flatten()),
            Array1::from(z.tangent().flatten()) * 0.5,
            epsilon = 1e-15
        );
        let (x, rep) = fs.cg_solve(OperatorKind::Full, &z, 1e-12, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_abs_diff_eq!(Array1::from(x.tangent().flatten()), Array1::from(z.tangent().flatten()) * 2.0, epsilon = 1e-13);
    }

    #[test]
    fn one_shot_with_single_class_is_full() {
        let (params, batch) = setup(4, 1, 5, 5);
        let full = GnFactorSet::assemble(&params, &batch, LossKind::LeastSquares, FactorMode::Full, 0.0, &mut seeded(0)).unwrap();
        let shot = GnFactorSet::assemble(&params, &batch, LossKind::LeastSquares, FactorMode::OneShot, 0.0, &mut seeded(1)).unwrap();
        let z = random_horizontal(&params, 6);
        assert_abs_diff_eq!(
            Array1::from(full.apply(&z).unwrap().tangent().flatten()),
            Array1::from(shot.apply(&z).unwrap().tangent().flatten()),
            epsilon = 1e-13
        );
    }

    #[test]
    fn rank_one_action_and_symmetry() {
        let (params, batch) = setup(4, 1, 1, 7);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::LeastSquares, FactorMode::Full, 0.0, &mut seeded(0)).unwrap();
        let xi = fs.factor(0, 0);
        let out = fs.apply(&xi).unwrap();
        let expect = xi.scaled(xi.inner(&xi).unwrap());
        assert_abs_diff_eq!(Array1::from(out.tangent().flatten()), Array1::from(expect.tangent().flatten()), epsilon = 1e-12);
        assert_eq!(fs.apply(&HorizontalTangent::zeros(&params)).unwrap().norm(), 0.0);

        let (params, batch) = setup(8, 3, 6, 8);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::MultinomialLogistic, FactorMode::Full, 0.1, &mut seeded(0)).unwrap();
        let a = random_horizontal(&params, 9);
        let b = random_horizontal(&params, 10);
        let lhs = fs.apply(&a).unwrap().inner(&b).unwrap();
        let rhs = a.inner(&fs.apply(&b).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        assert!(a.inner(&fs.apply(&a).unwrap()).unwrap() >= 0.1 * a.inner(&a).unwrap());
    }

    #[test]
    fn factors_are_horizontal() {
        let (params, batch) = setup(8, 3, 4, 11);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::MultinomialLogistic, FactorMode::Full, 0.0, &mut seeded(0)).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!(crate::geometry::horizontal_defect(&params, fs.factor(i, j).tangent()) <= 1e-12);
            }
        }
    }

    #[test]
    fn block_diagonal_matches_dense_blocks() {
        let (params, batch) = setup(4, 2, 6, 12);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::MultinomialLogistic, FactorMode::Full, 0.02, &mut seeded(0)).unwrap();
        let dense = dense_operator(&params, &batch, LossKind::MultinomialLogistic, 0.02);
        let bd = densify(&params, |z| fs.apply_block_diag(z).unwrap());
        let sizes: Vec<usize> = params.cores().iter().map(|c| c.len()).collect();
        let mut off = 0;
        let mut expect = Array2::<f64>::zeros(dense.dim());
        for s in &sizes {
            expect
                .slice_mut(ndarray::s![off..off + s, off..off + s])
                .assign(&dense.slice(ndarray::s![off..off + s, off..off + s]));
            off += s;
        }
        assert_abs_diff_eq!(bd, expect, epsilon = 1e-10);

        // support is preserved
        let z = random_horizontal(&params, 13).restricted_to(1);
        let out = fs.apply_block_diag(&z).unwrap();
        assert_eq!(out.block(0).dot(out.block(0)), 0.0);
        assert_eq!(out.block(2).dot(out.block(2)), 0.0);
    }

    #[test]
    fn single_node_block_diagonal_is_full() {
        let (params, batch) = setup(2, 3, 5, 14);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::MultinomialLogistic, FactorMode::Full, 0.01, &mut seeded(0)).unwrap();
        let z = random_horizontal(&params, 15);
        assert_abs_diff_eq!(
            Array1::from(fs.apply(&z).unwrap().tangent().flatten()),
            Array1::from(fs.apply_block_diag(&z).unwrap().tangent().flatten()),
            epsilon = 1e-14
        );
    }

    #[test]
    fn cg_matches_sherman_morrison() {
        let (params, batch) = setup(4, 1, 1, 16);
        let lambda = 0.3;
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::LeastSquares, FactorMode::Full, lambda, &mut seeded(0)).unwrap();
        let xi = fs.factor(0, 0);
        let b = random_horizontal(&params, 17);
        // (lambda I + xi xi^T)^{-1} b = b/lambda - xi (xi^T b) / (lambda (lambda + |xi|^2))
        let n2 = xi.inner(&xi).unwrap();
        let mut expect = b.scaled(1.0 / lambda);
        expect.axpy(-xi.inner(&b).unwrap() / (lambda * (lambda + n2)), &xi);
        let (x, rep) = fs.cg_solve(OperatorKind::Full, &b, 1e-12, 50).unwrap();
        assert!(rep.converged);
        assert_abs_diff_eq!(Array1::from(x.tangent().flatten()), Array1::from(expect.tangent().flatten()), epsilon = 1e-8);
    }

    #[test]
    fn block_max_eig_cases() {
        let (params, batch) = setup(4, 1, 1, 18);
        let fs = GnFactorSet::assemble(&params, &batch, LossKind::LeastSquares, FactorMode::Full, 0.25, &mut seeded(0)).unwrap();
        let xi = fs.factor(0, 0);
        let k = params.topology().root();
        let xk = xi.block(k).unfold();
        let n2 = xi.block(k).dot(xi.block(k));
        let est = fs.block_max_eig(k, xk, 0).unwrap();
        assert_abs_diff_eq!(est, n2 + 0.25, epsilon = 1e-12);
        assert!(fs.block_max_eig(k, Array2::zeros(xk.dim()).view(), 0).is_err());

        let zero_batch = FeatureBatch::new(batch.modes().iter().map(|a| Array2::zeros(a.dim())).collect()).unwrap();
        let fs0 = GnFactorSet::assemble(&params, &zero_batch, LossKind::LeastSquares, FactorMode::Full, 0.7, &mut seeded(0)).unwrap();
        let init = Array2::from_shape_fn(xk.dim(), |(a, b)| (a + 2 * b) as f64 - 1.5);
        assert_abs_diff_eq!(fs0.block_max_eig(k, init.view(), 3).unwrap(), 0.7, epsilon = 1e-14);
    }
}

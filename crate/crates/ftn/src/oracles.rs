//! Dense reference constructions for tiny instances: per-sample Jacobians,
//! the assembled Gauss-Newton matrix, an orthonormal basis of the horizontal
//! space and gauge transformations. Used by the self test and by tests.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use ftn_core::features::FeatureBatch;
use ftn_core::geometry::{horizontal_project, HorizontalTangent};
use ftn_core::kernels::{thin_qr, DenseTensor};
use ftn_core::losses::{weight_matrix, LossKind};
use ftn_core::model::{mode_product, TangentTuple, TtnParams};
use ftn_core::random::{seeded, std_normal, FtnRng};
use ftn_core::topology::Child;
use ftn_core::Result;

pub fn to_vector(t: &TangentTuple) -> DVector<f64> {
    DVector::from_vec(t.flatten())
}

pub fn from_vector(params: &TtnParams, v: &DVector<f64>) -> Result<TangentTuple> {
    TangentTuple::unflatten(&TangentTuple::zeros_like(params), v.as_slice())
}

pub fn param_dim(params: &TtnParams) -> usize {
    params.cores().iter().map(|c| c.len()).sum()
}

/// Matrix of the horizontal projection in flattened coordinates.
pub fn projection_matrix(params: &TtnParams) -> Result<DMatrix<f64>> {
    let n = param_dim(params);
    let mut p = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let col = horizontal_project(params, &from_vector(params, &e)?)?;
        p.set_column(j, &to_vector(col.tangent()));
    }
    Ok(p)
}

/// Orthonormal basis of the horizontal space (columns), from the unit
/// eigenvalues of the projection.
pub fn horizontal_basis(params: &TtnParams) -> Result<DMatrix<f64>> {
    let p = projection_matrix(params)?;
    let sym = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0.5)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

/// Per-sample Jacobians `n_0 x dim` of the outputs with respect to the
/// flattened cores.
pub fn jacobians(params: &TtnParams, batch: &FeatureBatch) -> Result<Vec<DMatrix<f64>>> {
    let n = param_dim(params);
    let n0 = params.topology().output_dim();
    let mut jac = vec![DMatrix::zeros(n0, n); batch.len()];
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let d = params.apply_dtau(batch, &from_vector(params, &e)?)?;
        for (i, row) in d.rows().into_iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                jac[i][(a, j)] = v;
            }
        }
    }
    Ok(jac)
}

/// `P ((1/m) sum_i J_i^T Delta_i J_i) P + lambda P` assembled densely.
pub fn dense_gauss_newton(params: &TtnParams, batch: &FeatureBatch, kind: LossKind, lambda: f64) -> Result<DMatrix<f64>> {
    let p = projection_matrix(params)?;
    let outputs = params.forward(batch)?;
    let n = param_dim(params);
    let mut gn = DMatrix::zeros(n, n);
    for (i, j) in jacobians(params, batch)?.iter().enumerate() {
        let w = weight_matrix(kind, outputs.row(i));
        let delta = DMatrix::from_fn(w.nrows(), w.ncols(), |a, b| w[[a, b]]);
        gn += j.transpose() * delta * j;
    }
    gn /= batch.len().max(1) as f64;
    Ok(&p * gn * &p + p * lambda)
}

/// `B^T A B` for a linear map `A` on horizontal tangents and basis `B`.
pub fn densify(
    params: &TtnParams,
    basis: &DMatrix<f64>,
    mut op: impl FnMut(&HorizontalTangent) -> Result<HorizontalTangent>,
) -> Result<DMatrix<f64>> {
    let k = basis.ncols();
    let mut images = DMatrix::zeros(basis.nrows(), k);
    for j in 0..k {
        let z = HorizontalTangent::new_unchecked(from_vector(params, &basis.column(j).into_owned())?);
        images.set_column(j, &to_vector(op(&z)?.tangent()));
    }
    Ok(basis.transpose() * images)
}

/// A random tangent with standard normal entries.
pub fn random_tangent(params: &TtnParams, rng: &mut FtnRng) -> TangentTuple {
    TangentTuple::new(
        params
            .cores()
            .iter()
            .map(|c| DenseTensor::new(c.shape().to_vec(), (0..c.len()).map(|_| std_normal(rng)).collect()).expect("shape"))
            .collect(),
    )
}

/// A random orthogonal matrix of size `n`.
pub fn random_orthogonal(n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = seeded(seed);
    let a = Array2::from_shape_fn((n, n), |_| std_normal(&mut rng));
    Ok(thin_qr(a.view())?.0)
}

/// Applies the gauge `Q` on the bond above non-root node `k`: the child's
/// output basis is rotated by `Q` and the parent compensates with `Q^T`,
/// leaving the represented function unchanged.
pub fn gauge_transform(params: &TtnParams, k: usize, q: &Array2<f64>) -> Result<TtnParams> {
    let topo = params.topology();
    let parent = topo.node(k).parent.ok_or_else(|| ftn_core::FtnError::InvalidArgument("the root has no bond above it".into()))?;
    let mut cores = params.cores().to_vec();
    let shape = topo.core_shape(k);
    cores[k] = DenseTensor::from_unfolding(&shape[..2], params.core(k).unfold().dot(q))?;
    let qt = q.t().to_owned();
    cores[parent] = if topo.node(parent).left == Child::Node(k) {
        mode_product(&cores[parent], Some(&qt), None)?
    } else {
        mode_product(&cores[parent], None, Some(&qt))?
    };
    TtnParams::new(topo.clone(), cores)
}

/// Least-squares slope of `log err` against `log t`.
pub fn fitted_order(ts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

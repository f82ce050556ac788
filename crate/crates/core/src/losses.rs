//! Loss values, output-space cotangents and Gauss-Newton weight factors.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{dim_err, FtnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/m) sum_i |f(x^i) - y^i|^2`.
    LeastSquares,
    /// Cross-entropy of softmax outputs against one-hot targets.
    MultinomialLogistic,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::LeastSquares => write!(f, "least-squares"),
            LossKind::MultinomialLogistic => write!(f, "multinomial-logistic"),
        }
    }
}

impl FromStr for LossKind {
    type Err = FtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least-squares" => Ok(LossKind::LeastSquares),
            "multinomial-logistic" | "logistic" => Ok(LossKind::MultinomialLogistic),
            other => Err(FtnError::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

/// Numerically stable softmax (the maximum is subtracted first).
pub fn softmax(z: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(z: ArrayView1<'_, f64>) -> f64 {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn check_one_hot(targets: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in targets.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(FtnError::InvalidArgument(format!(
                "logistic target row {i} is not one-hot"
            )));
        }
    }
    Ok(())
}

/// Per-sample loss `l(f, y)` (no `1/m` factor).
pub fn sample_loss(kind: LossKind, output: ArrayView1<'_, f64>, target: ArrayView1<'_, f64>) -> f64 {
    match kind {
        LossKind::LeastSquares => output
            .iter()
            .zip(target.iter())
            .map(|(f, y)| (f - y).powi(2))
            .sum(),
        LossKind::MultinomialLogistic => {
            let lse = log_sum_exp(output);
            -output
                .iter()
                .zip(target.iter())
                .map(|(z, y)| y * (z - lse))
                .sum::<f64>()
        }
    }
}

/// Mean loss over the batch and the per-sample cotangents `v^i = dl/df`.
pub fn loss_and_cotangents(
    kind: LossKind,
    outputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    if outputs.dim() != targets.dim() {
        return dim_err(format!(
            "outputs {:?} and targets {:?} differ in shape",
            outputs.dim(),
            targets.dim()
        ));
    }
    let m = outputs.nrows();
    if m == 0 {
        return Ok((0.0, Array2::zeros(outputs.dim())));
    }
    if kind == LossKind::MultinomialLogistic {
        check_one_hot(targets)?;
    }
    let mut total = 0.0;
    let mut cot = Array2::<f64>::zeros(outputs.dim());
    for ((f, y), mut v) in outputs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(cot.rows_mut())
    {
        total += sample_loss(kind, f, y);
        match kind {
            LossKind::LeastSquares => {
                v.assign(&((&f - &y) * 2.0));
            }
            LossKind::MultinomialLogistic => {
                let p = softmax(f);
                for ((vj, pj), yj) in v.iter_mut().zip(p).zip(y.iter()) {
                    *vj = pj - yj;
                }
            }
        }
    }
    let loss = total / m as f64;
    if !loss.is_finite() {
        return Err(FtnError::NonFinite("loss".into()));
    }
    Ok((loss, cot))
}

/// The per-sample Gauss-Newton weight matrix: the identity for least squares
/// and `C(z) = diag(p) - p p^T` with `p = softmax(z)` for logistic regression.
pub fn weight_matrix(kind: LossKind, z: ArrayView1<'_, f64>) -> Array2<f64> {
    let n = z.len();
    match kind {
        LossKind::LeastSquares => Array2::eye(n),
        LossKind::MultinomialLogistic => {
            let p = softmax(z);
            Array2::from_shape_fn((n, n), |(a, b)| {
                let d = if a == b { p[a] } else { 0.0 };
                d - p[a] * p[b]
            })
        }
    }
}

/// Vectors `w_j` with `sum_j w_j w_j^T` equal to [`weight_matrix`]. For the
/// logistic loss `w_j = Dsigma(z)[:, j] / sqrt(p_j) = sqrt(p_j) (e_j - p)`.
pub fn gn_weight_factors(kind: LossKind, z: ArrayView1<'_, f64>) -> Vec<Vec<f64>> {
    let n = z.len();
    match kind {
        LossKind::LeastSquares => (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect(),
        LossKind::MultinomialLogistic => {
            let p = softmax(z);
            (0..n).map(|j| logistic_factor(&p, j)).collect()
        }
    }
}

fn logistic_factor(p: &[f64], j: usize) -> Vec<f64> {
    let s = p[j].sqrt();
    p.iter()
        .enumerate()
        .map(|(a, &pa)| s * (if a == j { 1.0 } else { 0.0 } - pa))
        .collect()
}

/// One randomly drawn weight factor `w` with `E[w w^T]` equal to the weight
/// matrix. Logistic: index `k` is drawn with probability `p_k` and
/// `w = e_k - p`, i.e. the `k`-th factor of [`gn_weight_factors`] divided by
/// `sqrt(p_k)`. Least squares: `k` is uniform and `w = sqrt(n_0) e_k`.
pub fn sample_gn_weight_factor<R: Rng + ?Sized>(kind: LossKind, z: ArrayView1<'_, f64>, rng: &mut R) -> Vec<f64> {
    let n = z.len();
    match kind {
        LossKind::LeastSquares => {
            let k = rng.gen_range(0..n);
            let mut e = vec![0.0; n];
            e[k] = (n as f64).sqrt();
            e
        }
        LossKind::MultinomialLogistic => {
            let p = softmax(z);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut k = n - 1;
            for (j, &pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    k = j;
                    break;
                }
            }
            p.iter()
                .enumerate()
                .map(|(a, &pa)| if a == k { 1.0 } else { 0.0 } - pa)
                .collect()
        }
    }
}

/// Fraction of rows whose arg-max output matches the arg-max target.
pub fn accuracy(outputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let argmax = |r: ArrayView1<'_, f64>| {
        r.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    };
    let m = outputs.nrows();
    if m == 0 {
        return 0.0;
    }
    let hits = outputs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .filter(|(f, y)| argmax(*f) == argmax(*y))
        .count();
    hits as f64 / m as f64
}

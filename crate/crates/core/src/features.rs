//! Per-mode basis families and the batched feature evaluation.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{dim_err, FtnError, Result};
use crate::kernels::solve_square;

/// A univariate basis `phi_1..phi_n` applied identically to every input mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureFamily {
    /// `(1, x, x^2, ...)`.
    Monomial { degree: usize },
    /// Legendre polynomials orthonormal for the uniform probability measure on `[-1, 1]`.
    Legendre { degree: usize },
    /// Probabilists' Hermite polynomials `He_k`, optionally divided by `sqrt(k!)`.
    Hermite { degree: usize, normalized: bool },
    /// `(1, x) / sqrt(1 + x^2)`.
    NormalizedAffine,
}

/// Integration measure for closed-form Gram matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Uniform probability measure on `[-1, 1]`.
    UniformSym,
}

impl FeatureFamily {
    pub fn dim(&self) -> usize {
        match *self {
            FeatureFamily::Monomial { degree }
            | FeatureFamily::Legendre { degree }
            | FeatureFamily::Hermite { degree, .. } => degree + 1,
            FeatureFamily::NormalizedAffine => 2,
        }
    }

    /// Evaluates the basis at `x` into `out` (length [`FeatureFamily::dim`]).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        match *self {
            FeatureFamily::Monomial { .. } => {
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= x;
                }
            }
            FeatureFamily::Legendre { degree } => {
                // Classical P_k by (k+1) P_{k+1} = (2k+1) x P_k - k P_{k-1}.
                let (mut prev, mut cur) = (0.0, 1.0);
                for k in 0..=degree {
                    out[k] = cur * ((2 * k + 1) as f64).sqrt();
                    let next = ((2 * k + 1) as f64 * x * cur - k as f64 * prev) / (k + 1) as f64;
                    prev = cur;
                    cur = next;
                }
            }
            FeatureFamily::Hermite { degree, normalized } => {
                let (mut prev, mut cur) = (0.0, 1.0);
                let mut fact = 1.0;
                for k in 0..=degree {
                    if k > 0 {
                        fact *= k as f64;
                    }
                    out[k] = if normalized { cur / fact.sqrt() } else { cur };
                    let next = x * cur - k as f64 * prev;
                    prev = cur;
                    cur = next;
                }
            }
            FeatureFamily::NormalizedAffine => {
                let n = (1.0 + x * x).sqrt();
                out[0] = 1.0 / n;
                out[1] = x / n;
            }
        }
    }

    /// Monomial coefficients: row `j` holds the coefficients of `phi_j`.
    pub fn monomial_coefficients(&self) -> Result<Array2<f64>> {
        let n = self.dim();
        let mut c = Array2::<f64>::zeros((n, n));
        match *self {
            FeatureFamily::Monomial { .. } => c.diag_mut().fill(1.0),
            FeatureFamily::Legendre { .. } => {
                let mut p = recurrence_coefficients(n, |k, x_prev, prev, out| {
                    // (k+1) P_{k+1} = (2k+1) x P_k - k P_{k-1}
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = ((2 * k + 1) as f64 * x_prev[i] - k as f64 * prev[i]) / (k + 1) as f64;
                    }
                });
                for (k, mut row) in p.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v * ((2 * k + 1) as f64).sqrt());
                }
                c = p;
            }
            FeatureFamily::Hermite { normalized, .. } => {
                c = recurrence_coefficients(n, |k, x_prev, prev, out| {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = x_prev[i] - k as f64 * prev[i];
                    }
                });
                if normalized {
                    let mut fact = 1.0;
                    for (k, mut row) in c.rows_mut().into_iter().enumerate() {
                        if k > 0 {
                            fact *= k as f64;
                        }
                        let s = fact.sqrt();
                        row.mapv_inplace(|v| v / s);
                    }
                }
            }
            FeatureFamily::NormalizedAffine => {
                return Err(FtnError::InvalidArgument(
                    "normalized-affine features are not polynomial".into(),
                ))
            }
        }
        Ok(c)
    }

    /// The transform `M` with `self = M * other` pointwise, so that
    /// `other = M^{-1} self`. Both families must span the same polynomial space.
    pub fn transform_to(&self, other: &FeatureFamily) -> Result<Array2<f64>> {
        if self.dim() != other.dim() {
            return dim_err("basis transform between families of different size");
        }
        let from = self.monomial_coefficients()?;
        let to = other.monomial_coefficients()?;
        // from = M to  =>  to^T M^T = from^T
        Ok(solve_square(to.t(), from.t())?.reversed_axes())
    }
}

/// Builds the coefficient matrix of a three-term recurrence starting at
/// `p_0 = 1`, `p_{-1} = 0`. The closure receives `x * p_k`, `p_{k-1}` and
/// writes `p_{k+1}`.
fn recurrence_coefficients(
    n: usize,
    step: impl Fn(usize, &[f64], &[f64], &mut [f64]),
) -> Array2<f64> {
    let mut c = Array2::<f64>::zeros((n, n));
    let mut prev = vec![0.0; n];
    let mut cur = vec![0.0; n];
    cur[0] = 1.0;
    for k in 0..n {
        c.row_mut(k).assign(&ndarray::ArrayView1::from(&cur));
        if k + 1 == n {
            break;
        }
        let mut x_cur = vec![0.0; n];
        x_cur[1..].copy_from_slice(&cur[..n - 1]);
        let mut next = vec![0.0; n];
        step(k, &x_cur, &prev, &mut next);
        prev = std::mem::replace(&mut cur, next);
    }
    c
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureFamily::Monomial { .. } => write!(f, "monomial"),
            FeatureFamily::Legendre { .. } => write!(f, "legendre"),
            FeatureFamily::Hermite { normalized: false, .. } => write!(f, "hermite"),
            FeatureFamily::Hermite { normalized: true, .. } => write!(f, "hermite-normalized"),
            FeatureFamily::NormalizedAffine => write!(f, "normalized-affine"),
        }
    }
}

impl FeatureFamily {
    /// Parses a family name together with the polynomial degree.
    pub fn parse(name: &str, degree: usize) -> Result<Self> {
        Ok(match name {
            "monomial" => FeatureFamily::Monomial { degree },
            "legendre" => FeatureFamily::Legendre { degree },
            "hermite" => FeatureFamily::Hermite {
                degree,
                normalized: false,
            },
            "hermite-normalized" => FeatureFamily::Hermite {
                degree,
                normalized: true,
            },
            "normalized-affine" => FeatureFamily::NormalizedAffine,
            other => {
                return Err(FtnError::InvalidArgument(format!(
                    "unknown feature family '{other}'"
                )))
            }
        })
    }
}

impl FromStr for Measure {
    type Err = FtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform[-1,1]" => Ok(Measure::UniformSym),
            other => Err(FtnError::InvalidArgument(format!("unknown measure '{other}'"))),
        }
    }
}

/// Evaluated basis matrices, one `m x n_nu` matrix per input mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    modes: Vec<Array2<f64>>,
}

impl FeatureBatch {
    pub fn new(modes: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = modes.first() else {
            return dim_err("feature batch needs at least one mode");
        };
        let m = first.nrows();
        if modes.iter().any(|a| a.nrows() != m) {
            return dim_err("feature modes disagree on the sample count");
        }
        Ok(Self { modes })
    }

    pub fn len(&self) -> usize {
        self.modes[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn mode(&self, nu: usize) -> ArrayView2<'_, f64> {
        self.modes[nu].view()
    }

    pub fn modes(&self) -> &[Array2<f64>] {
        &self.modes
    }

    /// Rows `idx` of every mode, in the given order.
    pub fn select(&self, idx: &[usize]) -> FeatureBatch {
        FeatureBatch {
            modes: self
                .modes
                .iter()
                .map(|a| a.select(ndarray::Axis(0), idx))
                .collect(),
        }
    }

    /// Contiguous rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> FeatureBatch {
        FeatureBatch {
            modes: self
                .modes
                .iter()
                .map(|a| a.slice(ndarray::s![start..end, ..]).to_owned())
                .collect(),
        }
    }

    /// Applies `psi = t^{-1} phi` per mode, given `t^{-1}` per mode.
    pub fn transformed(&self, inverse_transforms: &[Array2<f64>]) -> Result<FeatureBatch> {
        if inverse_transforms.len() != self.modes.len() {
            return dim_err("one transform per mode required");
        }
        let modes = self
            .modes
            .iter()
            .zip(inverse_transforms)
            .map(|(a, t)| a.dot(&t.t()))
            .collect();
        FeatureBatch::new(modes)
    }
}

/// Evaluates `family` on every entry of `samples` (`m x d`).
pub fn eval_features(family: &FeatureFamily, samples: ArrayView2<'_, f64>) -> Result<FeatureBatch> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(FtnError::NonFinite("feature inputs".into()));
    }
    let (m, d) = samples.dim();
    let n = family.dim();
    let modes = (0..d)
        .map(|nu| {
            let mut out = Array2::<f64>::zeros((m, n));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                family.eval_into(samples[[i, nu]], row.as_slice_mut().expect("contiguous row"));
            }
            out
        })
        .collect();
    FeatureBatch::new(modes)
}

/// `G[j, k] = integral of phi_j phi_k` under `measure`, from closed-form
/// monomial moments.
pub fn gram_matrix(family: &FeatureFamily, measure: Measure) -> Result<Array2<f64>> {
    let coeffs = family.monomial_coefficients()?;
    let n = family.dim();
    let moments = match measure {
        Measure::UniformSym => Array2::from_shape_fn((n, n), |(a, b)| {
            let k = a + b;
            if k % 2 == 0 {
                1.0 / (k + 1) as f64
            } else {
                0.0
            }
        }),
    };
    Ok(coeffs.dot(&moments).dot(&coeffs.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut xs = vec![0.0; n];
        let mut ws = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    let (mut q0, mut q1) = (1.0, x);
                    for k in 2..=n {
                        let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                        q0 = q1;
                        q1 = q2;
                    }
                    let dq = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                    ws[i] = 2.0 / ((1.0 - x * x) * dq * dq);
                    break;
                }
            }
            xs[i] = x;
        }
        (xs, ws)
    }

    fn quadrature_gram(family: &FeatureFamily) -> Array2<f64> {
        let (xs, ws) = gauss_legendre(64);
        let n = family.dim();
        let mut g = Array2::<f64>::zeros((n, n));
        let mut buf = vec![0.0; n];
        for (x, w) in xs.iter().zip(&ws) {
            family.eval_into(*x, &mut buf);
            for a in 0..n {
                for b in 0..n {
                    g[[a, b]] += 0.5 * w * buf[a] * buf[b];
                }
            }
        }
        g
    }

    #[test]
    fn normalized_affine_at_zero() {
        let fb = eval_features(&FeatureFamily::NormalizedAffine, array![[0.0]].view()).unwrap();
        assert_eq!(fb.mode(0).row(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn normalized_affine_rows_unit_norm() {
        let xs = array![[0.3, -4.0, 17.0, 1.0]];
        let fb = eval_features(&FeatureFamily::NormalizedAffine, xs.view()).unwrap();
        for nu in 0..4 {
            let r = fb.mode(nu).row(0).to_owned();
            assert_abs_diff_eq!(r.dot(&r), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn legendre_at_one() {
        let fb = eval_features(&FeatureFamily::Legendre { degree: 2 }, array![[1.0]].view()).unwrap();
        let row = fb.mode(0).row(0).to_vec();
        assert_abs_diff_eq!(row[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(row[2], 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn monomial_at_two() {
        let fb = eval_features(&FeatureFamily::Monomial { degree: 2 }, array![[2.0]].view()).unwrap();
        assert_eq!(fb.mode(0).row(0).to_vec(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn hermite_values() {
        let mut out = [0.0; 4];
        FeatureFamily::Hermite { degree: 3, normalized: false }.eval_into(2.0, &mut out);
        // He_2 = x^2 - 1, He_3 = x^3 - 3x
        assert_eq!(out, [1.0, 2.0, 3.0, 2.0]);
        FeatureFamily::Hermite { degree: 3, normalized: true }.eval_into(2.0, &mut out);
        assert_abs_diff_eq!(out[3], 2.0 / 6f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn gram_matrices() {
        let leg = gram_matrix(&FeatureFamily::Legendre { degree: 5 }, Measure::UniformSym).unwrap();
        assert_abs_diff_eq!(leg, Array2::eye(6), epsilon = 1e-12);
        let m1 = gram_matrix(&FeatureFamily::Monomial { degree: 1 }, Measure::UniformSym).unwrap();
        assert_abs_diff_eq!(m1, array![[1.0, 0.0], [0.0, 1.0 / 3.0]], epsilon = 1e-15);
        let m2 = gram_matrix(&FeatureFamily::Monomial { degree: 2 }, Measure::UniformSym).unwrap();
        let expect = array![
            [1.0, 0.0, 1.0 / 3.0],
            [0.0, 1.0 / 3.0, 0.0],
            [1.0 / 3.0, 0.0, 1.0 / 5.0]
        ];
        assert_abs_diff_eq!(m2, expect, epsilon = 1e-15);
        assert!(gram_matrix(&FeatureFamily::NormalizedAffine, Measure::UniformSym).is_err());
    }

    #[test]
    fn gram_matches_quadrature() {
        for fam in [
            FeatureFamily::Legendre { degree: 6 },
            FeatureFamily::Monomial { degree: 4 },
            FeatureFamily::Hermite { degree: 4, normalized: false },
        ] {
            let closed = gram_matrix(&fam, Measure::UniformSym).unwrap();
            assert_abs_diff_eq!(closed, quadrature_gram(&fam), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            quadrature_gram(&FeatureFamily::Legendre { degree: 8 }),
            Array2::eye(9),
            epsilon = 1e-12
        );
    }

    #[test]
    fn coefficients_match_evaluation() {
        for fam in [
            FeatureFamily::Legendre { degree: 4 },
            FeatureFamily::Hermite { degree: 4, normalized: true },
        ] {
            let c = fam.monomial_coefficients().unwrap();
            let mut vals = [0.0; 5];
            for &x in &[-0.7, 0.1, 0.9] {
                fam.eval_into(x, &mut vals);
                for j in 0..5 {
                    let poly: f64 = (0..5).map(|k| c[[j, k]] * x.powi(k as i32)).sum();
                    assert_abs_diff_eq!(poly, vals[j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn transform_relates_bases() {
        let mono = FeatureFamily::Monomial { degree: 2 };
        let leg = FeatureFamily::Legendre { degree: 2 };
        let m = mono.transform_to(&leg).unwrap();
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        for &x in &[-0.4, 0.2, 0.95] {
            mono.eval_into(x, &mut a);
            leg.eval_into(x, &mut b);
            let mapped = m.dot(&ndarray::arr1(&b));
            for j in 0..3 {
                assert_abs_diff_eq!(mapped[j], a[j], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn rows_are_independent() {
        let fam = FeatureFamily::Legendre { degree: 3 };
        let xs = array![[0.1, 0.2], [0.3, -0.5], [0.9, 0.0]];
        let full = eval_features(&fam, xs.view()).unwrap();
        let single = eval_features(&fam, xs.slice(ndarray::s![1..2, ..])).unwrap();
        assert_eq!(full.select(&[1]), single);
        assert!(FeatureFamily::parse("fourier", 2).is_err());
    }
}

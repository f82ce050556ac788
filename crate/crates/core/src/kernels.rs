//! Dense multilinear primitives shared by the whole crate.
//!
//! All tensors are stored row-major. A core of shape `r_l x r_r x r_t` is
//! therefore, without copying, the `(r_l * r_r) x r_t` matrix whose row
//! `a * r_r + b` holds the fibre `core[a, b, :]`. Every unfolding in the crate
//! is defined against this order.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{dim_err, FtnError, Result};

/// A real tensor of arbitrary order with contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("tensor shape {shape:?} has a zero dimension"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return dim_err(format!(
                "tensor shape {shape:?} needs {len} entries, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FtnError::NonFinite("tensor entries".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Wraps a matrix as a tensor whose leading modes are `lead` (their
    /// product must equal the row count) followed by the column mode.
    pub fn from_unfolding(lead: &[usize], mat: Array2<f64>) -> Result<Self> {
        let rows: usize = lead.iter().product();
        if rows != mat.nrows() {
            return dim_err(format!(
                "unfolding has {} rows, modes {lead:?} need {rows}",
                mat.nrows()
            ));
        }
        let mut shape = lead.to_vec();
        shape.push(mat.ncols());
        let data = if mat.is_standard_layout() {
            mat.into_raw_vec_and_offset().0
        } else {
            mat.iter().copied().collect()
        };
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matricization with the last mode as columns.
    pub fn unfold(&self) -> ArrayView2<'_, f64> {
        let cols = *self.shape.last().expect("tensor has at least one mode");
        ArrayView2::from_shape((self.data.len() / cols, cols), &self.data)
            .expect("row-major storage")
    }

    pub fn unfold_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let cols = *self.shape.last().expect("tensor has at least one mode");
        let rows = self.data.len() / cols;
        ArrayViewMut2::from_shape((rows, cols), &mut self.data).expect("row-major storage")
    }

    pub fn dot(&self, other: &DenseTensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &DenseTensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += c * b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-wise Kronecker product: row `i` of the result is `kron(u[i], v[i])`.
pub fn khatri_rao(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if u.nrows() != v.nrows() {
        return dim_err(format!(
            "khatri_rao row counts differ: {} vs {}",
            u.nrows(),
            v.nrows()
        ));
    }
    let (p, q) = (u.ncols(), v.ncols());
    let mut out = Array2::<f64>::zeros((u.nrows(), p * q));
    for ((urow, vrow), mut orow) in u
        .axis_iter(Axis(0))
        .zip(v.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        let orow = orow.as_slice_mut().expect("fresh array is contiguous");
        for (a, &ua) in urow.iter().enumerate() {
            let dst = &mut orow[a * q..(a + 1) * q];
            for (d, &vb) in dst.iter_mut().zip(vrow.iter()) {
                *d = ua * vb;
            }
        }
    }
    Ok(out)
}

/// Matricized tensor times Khatri-Rao product for a third-order core:
/// `khatri_rao(u, v) * unfold(core)`.
pub fn mttkrp(
    core: &DenseTensor,
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let shape = core.shape();
    if shape.len() != 3 || shape[0] != u.ncols() || shape[1] != v.ncols() {
        return dim_err(format!(
            "mttkrp: core {shape:?} incompatible with factors of widths {} and {}",
            u.ncols(),
            v.ncols()
        ));
    }
    Ok(khatri_rao(u, v)?.dot(&core.unfold()))
}

/// Thin Householder QR of a tall matrix.
///
/// Returns `(q, r)` with `m = q r`, orthonormal columns in `q` and an upper
/// triangular `r` whose diagonal is nonnegative.
pub fn thin_qr(m: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, r) = m.dim();
    if n < r {
        return dim_err(format!("thin_qr needs rows >= cols, got {n}x{r}"));
    }
    let mut a = m.to_owned();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let mut v: Vec<f64> = (k..n).map(|i| a[[i, k]]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        for j in k..r {
            let s: f64 = v.iter().enumerate().map(|(i, vi)| vi * a[[k + i, j]]).sum();
            let f = 2.0 * s / vnorm2;
            for (i, vi) in v.iter().enumerate() {
                a[[k + i, j]] -= f * vi;
            }
        }
        vs.push(v);
    }

    let mut rmat = Array2::<f64>::zeros((r, r));
    for i in 0..r {
        for j in i..r {
            rmat[[i, j]] = a[[i, j]];
        }
    }

    // Accumulate Q = H_0 ... H_{r-1} applied to the first r unit vectors.
    let mut q = Array2::<f64>::zeros((n, r));
    for j in 0..r {
        q[[j, j]] = 1.0;
    }
    for k in (0..r).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for j in 0..r {
            let s: f64 = v.iter().enumerate().map(|(i, vi)| vi * q[[k + i, j]]).sum();
            if s == 0.0 {
                continue;
            }
            let f = 2.0 * s / vnorm2;
            for (i, vi) in v.iter().enumerate() {
                q[[k + i, j]] -= f * vi;
            }
        }
    }

    for i in 0..r {
        if rmat[[i, i]] < 0.0 {
            rmat.row_mut(i).mapv_inplace(|x| -x);
            q.column_mut(i).mapv_inplace(|x| -x);
        }
    }
    Ok((q, rmat))
}

/// Solves `a x = b` for square nonsingular `a` through [`thin_qr`].
pub fn solve_square(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return dim_err("solve_square: shapes are not compatible");
    }
    let (q, r) = thin_qr(a)?;
    let scale = r.diag().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diag().iter().any(|&d| d <= 1e-13 * scale.max(f64::MIN_POSITIVE)) {
        return Err(FtnError::Degenerate("singular system matrix".into()));
    }
    let mut x = q.t().dot(&b);
    for col in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for j in i + 1..n {
                s -= r[[i, j]] * x[[j, col]];
            }
            x[[i, col]] = s / r[[i, i]];
        }
    }
    Ok(x)
}

//! Quotient geometry of the core tuple.
//!
//! The horizontal space at `params` consists of tangent tuples whose non-root
//! blocks satisfy `A_t^T dA_t = 0`; the root block is unconstrained. The
//! projector onto it acts independently per core.

use ndarray::Array2;

use crate::error::{dim_err, Result};
use crate::kernels::DenseTensor;
use crate::model::{orthonormalize, TangentTuple, TtnParams};

/// A tangent tuple known to be horizontal at some base point.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalTangent(TangentTuple);

impl HorizontalTangent {
    /// Wraps a tuple the caller guarantees to be horizontal.
    pub fn new_unchecked(t: TangentTuple) -> Self {
        Self(t)
    }

    pub fn zeros(params: &TtnParams) -> Self {
        Self(TangentTuple::zeros_like(params))
    }

    pub fn tangent(&self) -> &TangentTuple {
        &self.0
    }

    pub fn into_tangent(self) -> TangentTuple {
        self.0
    }

    pub fn inner(&self, other: &HorizontalTangent) -> Result<f64> {
        self.0.inner(&other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.scaled(c))
    }

    pub fn scale(&mut self, c: f64) {
        self.0.scale(c)
    }

    /// Linear combinations of horizontal vectors at one base stay horizontal.
    pub fn axpy(&mut self, c: f64, other: &HorizontalTangent) {
        self.0.axpy(c, &other.0)
    }

    pub fn block(&self, k: usize) -> &DenseTensor {
        self.0.block(k)
    }

    pub fn restricted_to(&self, k: usize) -> Self {
        Self(self.0.restricted_to(k))
    }
}

/// Orthogonal projection onto the horizontal space at `params`:
/// `dA_t <- dA_t - A_t (A_t^T dA_t)` on every non-root node.
pub fn horizontal_project(params: &TtnParams, tangent: &TangentTuple) -> Result<HorizontalTangent> {
    check_shapes(params, tangent)?;
    let root = params.topology().root();
    let blocks = tangent
        .blocks()
        .iter()
        .enumerate()
        .map(|(k, block)| {
            if k == root {
                return Ok(block.clone());
            }
            let a = params.core(k).unfold();
            let d = block.unfold();
            let projected = &d - &a.dot(&a.t().dot(&d));
            DenseTensor::from_unfolding(&block.shape()[..2], projected)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizontalTangent(TangentTuple::new(blocks)))
}

/// Largest entry of `A_t^T dA_t` over the non-root nodes.
pub fn horizontal_defect(params: &TtnParams, tangent: &TangentTuple) -> f64 {
    let root = params.topology().root();
    tangent
        .blocks()
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != root)
        .map(|(k, block)| {
            let g: Array2<f64> = params.core(k).unfold().t().dot(&block.unfold());
            g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .fold(0.0, f64::max)
}

/// QR-based retraction of `params + step * direction`.
///
/// Children are orthonormalized before their parents and each R factor is
/// absorbed into the parent's (already perturbed) core, so the result
/// represents exactly the tensor of the additively updated cores.
pub fn qr_retract(params: &TtnParams, direction: &HorizontalTangent, step: f64) -> Result<TtnParams> {
    check_shapes(params, direction.tangent())?;
    let cores = params
        .cores()
        .iter()
        .zip(direction.tangent().blocks())
        .map(|(c, d)| {
            let mut c = c.clone();
            c.axpy(step, d);
            c
        })
        .collect();
    orthonormalize(params.topology(), cores)
}

/// Vector transport by projection onto the horizontal space at `new_params`.
pub fn transport(new_params: &TtnParams, tangent: &TangentTuple) -> Result<HorizontalTangent> {
    horizontal_project(new_params, tangent)
}

/// Euclidean inner product on the product of core spaces.
pub fn inner(xi: &TangentTuple, eta: &TangentTuple) -> Result<f64> {
    xi.inner(eta)
}

fn check_shapes(params: &TtnParams, tangent: &TangentTuple) -> Result<()> {
    if tangent.blocks().len() != params.cores().len()
        || tangent
            .blocks()
            .iter()
            .zip(params.cores())
            .any(|(t, c)| t.shape() != c.shape())
    {
        return dim_err("tangent does not match the parameter shapes");
    }
    Ok(())
}

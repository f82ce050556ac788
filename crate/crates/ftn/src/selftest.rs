//! Tiny-instance oracle suite behind `ftn selftest`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use ftn_core::features::{eval_features, FeatureBatch, FeatureFamily};
use ftn_core::gauss_newton::{FactorMode, GnFactorSet};
use ftn_core::geometry::{horizontal_project, qr_retract};
use ftn_core::losses::LossKind;
use ftn_core::model::TtnParams;
use ftn_core::optimizers::riemannian_gradient;
use ftn_core::random::{seeded, std_normal};
use ftn_core::topology::{BondDims, TreeTopology};
use ftn_core::Result;

use crate::oracles;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity the check compares against its tolerance.
    pub value: f64,
    pub detail: String,
}

/// A tiny instance: `d` leaves with `n` features each, uniform bond `r`,
/// `n0` outputs and `m` samples from `[-1,1]^d`.
pub fn tiny_instance(d: usize, n: usize, r: usize, n0: usize, m: usize, seed: u64) -> Result<(TtnParams, FeatureBatch)> {
    let topo = TreeTopology::requested(&vec![n; d], n0, &BondDims::Uniform(r))?.clamp_bond_dims();
    let mut rng = seeded(seed);
    let x = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
    let batch = eval_features(&FeatureFamily::Legendre { degree: n - 1 }, x.view())?;
    Ok((TtnParams::random_init(&topo, &batch, seed)?, batch))
}

fn dense_gn_check() -> Result<Check> {
    let (params, batch) = tiny_instance(4, 2, 2, 2, 8, 1)?;
    let basis = oracles::horizontal_basis(&params)?;
    let mut worst: f64 = 0.0;
    for kind in [LossKind::LeastSquares, LossKind::MultinomialLogistic] {
        let fs = GnFactorSet::assemble(&params, &batch, kind, FactorMode::Full, 1e-3, &mut seeded(0))?;
        let fast = oracles::densify(&params, &basis, |z| fs.apply(z))?;
        let dense = oracles::dense_gauss_newton(&params, &batch, kind, 1e-3)?;
        let dense = basis.transpose() * dense * &basis;
        worst = worst.max(oracles::max_abs_diff(&fast, &dense));
    }
    Ok(Check {
        name: "dense Gauss-Newton equivalence",
        passed: worst <= 1e-9,
        value: worst,
        detail: format!("max entry error {worst:.2e}"),
    })
}

fn adjoint_check() -> Result<Check> {
    let (params, batch) = tiny_instance(8, 3, 3, 3, 20, 2)?;
    let mut rng = seeded(3);
    let xi = oracles::random_tangent(&params, &mut rng);
    let v = Array2::from_shape_fn((batch.len(), 3), |_| std_normal(&mut rng));
    let lhs = (&params.apply_dtau(&batch, &xi)? * &v).sum();
    let rhs = params.backprop(&batch, v.view(), 1.0)?.inner(&xi)?;
    let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
    Ok(Check {
        name: "adjoint identity <DF[xi], v> = <xi, DF*[v]>",
        passed: rel <= 1e-10,
        value: rel,
        detail: format!("relative error {rel:.2e}"),
    })
}

fn retraction_check() -> Result<Check> {
    let (params, batch) = tiny_instance(4, 3, 3, 2, 16, 4)?;
    let dir = horizontal_project(&params, &oracles::random_tangent(&params, &mut seeded(5)))?;
    let f0 = params.forward(&batch)?;
    let df = params.apply_dtau(&batch, dir.tangent())?;
    let ts = [1e-1, 5e-2, 2.5e-2, 1.25e-2, 6.25e-3];
    let mut errs = Vec::new();
    for &t in &ts {
        let ft = qr_retract(&params, &dir, t)?.forward(&batch)?;
        errs.push((&ft - &f0 - &df * t).mapv(|v| v * v).sum().sqrt());
    }
    let order = oracles::fitted_order(&ts, &errs);
    Ok(Check {
        name: "retraction is second-order accurate",
        passed: order >= 1.9,
        value: order,
        detail: format!("fitted order {order:.3}"),
    })
}

fn gauge_check() -> Result<Check> {
    let (params, batch) = tiny_instance(4, 3, 3, 2, 16, 6)?;
    let mut rng = seeded(7);
    let targets = Array2::from_shape_fn((batch.len(), 2), |_| std_normal(&mut rng));
    let q = oracles::random_orthogonal(params.topology().core_shape(0)[2], 8)?;
    let gauged = oracles::gauge_transform(&params, 0, &q)?;
    let out_err = (&params.forward(&batch)? - &gauged.forward(&batch)?).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    let g = riemannian_gradient(&params, &batch, targets.view(), LossKind::LeastSquares)?;
    let gg = riemannian_gradient(&gauged, &batch, targets.view(), LossKind::LeastSquares)?;
    let img = params.apply_dtau(&batch, g.tangent())?;
    let img_g = gauged.apply_dtau(&batch, gg.tangent())?;
    let img_err = (&img - &img_g).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    let worst = out_err.max(img_err);
    Ok(Check {
        name: "gauge invariance of outputs and gradient images",
        passed: worst <= 1e-10,
        value: worst,
        detail: format!("max deviation {worst:.2e}"),
    })
}

fn checkpoint_check(path: &Path) -> Check {
    let result = std::fs::File::open(path)
        .map_err(ftn_core::FtnError::from)
        .and_then(|f| TtnParams::read_checkpoint(std::io::BufReader::new(f)))
        .and_then(|p| p.check_stiefel(1e-10).map(|_| p.stiefel_defect()));
    match result {
        Ok(defect) => Check {
            name: "checkpoint Stiefel invariant",
            passed: true,
            value: defect,
            detail: format!("defect {defect:.2e}"),
        },
        Err(e) => Check {
            name: "checkpoint Stiefel invariant",
            passed: false,
            value: f64::NAN,
            detail: e.to_string(),
        },
    }
}

/// Runs every property; a property whose evaluation errors counts as failed.
pub fn run_all(checkpoint: Option<&Path>) -> Vec<Check> {
    let props: [(&'static str, fn() -> Result<Check>); 4] = [
        ("dense Gauss-Newton equivalence", dense_gn_check),
        ("adjoint identity", adjoint_check),
        ("retraction order", retraction_check),
        ("gauge invariance", gauge_check),
    ];
    let mut checks: Vec<Check> = props
        .iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| Check {
                name,
                passed: false,
                value: f64::NAN,
                detail: e.to_string(),
            })
        })
        .collect();
    if let Some(p) = checkpoint {
        checks.push(checkpoint_check(p));
    }
    checks
}

//! Training loops: Riemannian gradient descent and the natural gradient
//! family (full, block-diagonal, one-shot block-diagonal and scaled-identity
//! with momentum), with two-way Armijo backtracking or fixed steps.
//!
//! Every method computes a horizontal direction `zeta` at the current point
//! and moves to `qr_retract(params, zeta, -gamma)`.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{ArrayView2, Axis};

use crate::error::{FtnError, Result};
use crate::features::FeatureBatch;
use crate::gauss_newton::{CgReport, FactorMode, GnFactorSet, OperatorKind, DEFAULT_CG_MAX_ITER, DEFAULT_CG_TOL, DEFAULT_LAMBDA};
use crate::geometry::{horizontal_project, qr_retract, transport, HorizontalTangent};
use crate::kernels::DenseTensor;
use crate::losses::{accuracy, loss_and_cotangents, sample_loss, LossKind};
use crate::model::{TangentTuple, TtnParams};
use crate::random::{permutation, seeded, FtnRng};

pub const ARMIJO_C: f64 = 1e-4;
pub const ARMIJO_MAX_DOUBLINGS: usize = 10;
pub const ARMIJO_MAX_HALVINGS: usize = 40;
pub const DEFAULT_EVAL_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grad,
    Ngrad,
    BdNgrad,
    BdoNgrad,
    DNgrad,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Grad, Method::Ngrad, Method::BdNgrad, Method::BdoNgrad, Method::DNgrad];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grad => "grad",
            Method::Ngrad => "ngrad",
            Method::BdNgrad => "bd-ngrad",
            Method::BdoNgrad => "bdo-ngrad",
            Method::DNgrad => "d-ngrad",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FtnError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| FtnError::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    /// Two-way backtracking with sufficient-decrease constant `c`, starting
    /// from `initial`.
    Armijo { c: f64, initial: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub step: StepPolicy,
    /// Momentum factor for the search direction (grad and d-ngrad).
    pub beta1: f64,
    /// Averaging factor for the per-node curvature estimates (d-ngrad).
    pub beta2: f64,
    pub lambda: f64,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub eval_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Ngrad,
            step: StepPolicy::Armijo { c: ARMIJO_C, initial: 1.0 },
            beta1: 0.0,
            beta2: 0.9,
            lambda: DEFAULT_LAMBDA,
            batch_size: 0,
            max_iters: 500,
            seed: 0,
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iter: DEFAULT_CG_MAX_ITER,
            eval_every: DEFAULT_EVAL_EVERY,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FtnError::InvalidArgument(msg));
        match self.step {
            StepPolicy::Armijo { c, initial } => {
                if !(c > 0.0 && c < 1.0) {
                    return bad(format!("armijo constant must be in (0,1), got {c}"));
                }
                if !(initial > 0.0 && initial.is_finite()) {
                    return bad(format!("initial step must be positive, got {initial}"));
                }
            }
            StepPolicy::Fixed(g) => {
                if !(g > 0.0 && g.is_finite()) {
                    return bad(format!("fixed step must be positive, got {g}"));
                }
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0,1), got {b}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.cg_tol.is_nan() || self.cg_tol <= 0.0 || self.cg_max_iter == 0 {
            return bad("cg tolerance and iteration cap must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Optimization time since the start of the run (evaluation excluded).
    pub seconds: f64,
    /// Loss at this iterate on the batch it is trained with.
    pub train_loss: f64,
    /// Step size of the update that produced this iterate (0 for the first).
    pub step_size: f64,
    pub test_accuracy: Option<f64>,
    pub method: Method,
}

/// Mean loss of the model on a batch.
pub fn empirical_loss(params: &TtnParams, batch: &FeatureBatch, targets: ArrayView2<'_, f64>, kind: LossKind) -> Result<f64> {
    let out = params.forward(batch)?;
    if out.dim() != targets.dim() {
        return Err(FtnError::Dimension(format!("targets {:?} vs outputs {:?}", targets.dim(), out.dim())));
    }
    if out.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = out.rows().into_iter().zip(targets.rows()).map(|(f, y)| sample_loss(kind, f, y)).sum();
    let loss = total / out.nrows() as f64;
    if !loss.is_finite() {
        return Err(FtnError::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Empirical risk and its Riemannian gradient.
pub fn loss_and_gradient(
    params: &TtnParams,
    batch: &FeatureBatch,
    targets: ArrayView2<'_, f64>,
    kind: LossKind,
) -> Result<(f64, HorizontalTangent)> {
    let out = params.forward(batch)?;
    let (loss, cot) = loss_and_cotangents(kind, out.view(), targets)?;
    let m = batch.len().max(1) as f64;
    let g = params.backprop(batch, cot.view(), 1.0 / m)?;
    Ok((loss, horizontal_project(params, &g)?))
}

pub fn riemannian_gradient(
    params: &TtnParams,
    batch: &FeatureBatch,
    targets: ArrayView2<'_, f64>,
    kind: LossKind,
) -> Result<HorizontalTangent> {
    Ok(loss_and_gradient(params, batch, targets, kind)?.1)
}

/// Two-way Armijo backtracking that remembers the last accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoSearch {
    pub c: f64,
    pub gamma: f64,
    pub max_doublings: usize,
    pub max_halvings: usize,
}

impl ArmijoSearch {
    pub fn new(c: f64, initial: f64) -> Self {
        Self {
            c,
            gamma: initial,
            max_doublings: ARMIJO_MAX_DOUBLINGS,
            max_halvings: ARMIJO_MAX_HALVINGS,
        }
    }

    /// Finds `gamma = gamma_init * 2^k` satisfying
    /// `eval(gamma) <= base + c * gamma * slope`, preferring the largest such
    /// step along the doubling or halving sequence. `eval` returns the value
    /// and any payload worth keeping (e.g. the trial point); evaluation
    /// errors count as rejected trials. Returns `(gamma, value, payload)`.
    pub fn search<T, F>(&mut self, mut eval: F, base: f64, slope: f64) -> Result<(f64, f64, T)>
    where
        F: FnMut(f64) -> Result<(f64, T)>,
    {
        if slope.is_nan() || slope >= 0.0 {
            return Err(FtnError::LineSearch(format!("not a descent direction (slope {slope:e})")));
        }
        let c = self.c;
        let mut accept = |gamma: f64| -> Option<(f64, T)> {
            match eval(gamma) {
                Ok((v, t)) if v.is_finite() && v <= base + c * gamma * slope => Some((v, t)),
                _ => None,
            }
        };
        let mut gamma = self.gamma;
        let result = if let Some(first) = accept(gamma) {
            let mut best = (gamma, first.0, first.1);
            for _ in 0..self.max_doublings {
                match accept(gamma * 2.0) {
                    Some((v, t)) => {
                        gamma *= 2.0;
                        best = (gamma, v, t);
                    }
                    None => break,
                }
            }
            best
        } else {
            let mut found = None;
            for _ in 0..self.max_halvings {
                gamma *= 0.5;
                if let Some((v, t)) = accept(gamma) {
                    found = Some((gamma, v, t));
                    break;
                }
            }
            found.ok_or_else(|| {
                FtnError::LineSearch(format!("no acceptable step after {} halvings", self.max_halvings))
            })?
        };
        self.gamma = result.0;
        Ok(result)
    }
}

/// Diagnostics of a single optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Loss at the point the step started from.
    pub loss: f64,
    pub step_size: f64,
    /// `<rgrad, zeta>`; positive for descent directions.
    pub descent: f64,
    pub gradient_norm: f64,
    pub cg: Option<CgReport>,
}

/// Optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    params: TtnParams,
    armijo: Option<ArmijoSearch>,
    momentum: Option<HorizontalTangent>,
    curvature: Vec<f64>,
    sample_rng: FtnRng,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: TtnParams) -> Result<Self> {
        cfg.validate()?;
        let armijo = match cfg.step {
            StepPolicy::Armijo { c, initial } => Some(ArmijoSearch::new(c, initial)),
            StepPolicy::Fixed(_) => None,
        };
        let curvature = vec![1.0; params.topology().node_count()];
        let sample_rng = seeded(cfg.seed ^ 0x5eed_0f0e_5e0f_u64);
        Ok(Self {
            cfg,
            params,
            armijo,
            momentum: None,
            curvature,
            sample_rng,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TtnParams {
        &self.params
    }

    pub fn into_params(self) -> TtnParams {
        self.params
    }

    /// Momentum direction, already transported to the current point.
    pub fn momentum(&self) -> Option<&HorizontalTangent> {
        self.momentum.as_ref()
    }

    /// Running per-node curvature estimates of d-ngrad.
    pub fn curvature_averages(&self) -> &[f64] {
        &self.curvature
    }

    /// The (unscaled) search direction at the current point for gradient `g`.
    /// Updates momentum and curvature averages.
    pub fn direction(
        &mut self,
        batch: &FeatureBatch,
        kind: LossKind,
        g: &HorizontalTangent,
    ) -> Result<(HorizontalTangent, Option<CgReport>)> {
        let cfg = &self.cfg;
        let assemble = |mode, rng: &mut FtnRng| GnFactorSet::assemble(&self.params, batch, kind, mode, cfg.lambda, rng);
        match cfg.method {
            Method::Grad => Ok((self.with_momentum(g.clone()), None)),
            Method::Ngrad | Method::BdNgrad | Method::BdoNgrad => {
                let (mode, op) = match cfg.method {
                    Method::Ngrad => (FactorMode::Full, OperatorKind::Full),
                    Method::BdNgrad => (FactorMode::Full, OperatorKind::BlockDiagonal),
                    _ => (FactorMode::OneShot, OperatorKind::BlockDiagonal),
                };
                let mut rng = self.sample_rng.clone();
                let fs = assemble(mode, &mut rng)?;
                self.sample_rng = rng;
                let (z, rep) = fs.cg_solve(op, g, cfg.cg_tol, cfg.cg_max_iter)?;
                Ok((z, Some(rep)))
            }
            Method::DNgrad => {
                let mut rng = self.sample_rng.clone();
                let fs = assemble(FactorMode::OneShot, &mut rng)?;
                self.sample_rng = rng;
                let beta2 = cfg.beta2;
                let mut blocks = Vec::with_capacity(self.curvature.len());
                for (k, avg) in self.curvature.iter_mut().enumerate() {
                    let gk = g.block(k);
                    if gk.dot(gk) > 0.0 {
                        let est = fs.block_max_eig(k, gk.unfold(), 0)?;
                        *avg = beta2 * *avg + (1.0 - beta2) * est;
                    }
                    let mut b = gk.clone();
                    b.scale(1.0 / *avg);
                    blocks.push(b);
                }
                let scaled = HorizontalTangent::new_unchecked(TangentTuple::new(blocks));
                Ok((self.with_momentum(scaled), None))
            }
        }
    }

    fn with_momentum(&mut self, d: HorizontalTangent) -> HorizontalTangent {
        let beta = self.cfg.beta1;
        if beta == 0.0 {
            return d;
        }
        let z = match self.momentum.take() {
            Some(mut m) => {
                m.scale(beta);
                m.axpy(1.0 - beta, &d);
                m
            }
            None => d.scaled(1.0 - beta),
        };
        self.momentum = Some(z.clone());
        z
    }

    /// Performs one step on the given batch.
    pub fn step(&mut self, batch: &FeatureBatch, targets: ArrayView2<'_, f64>, kind: LossKind) -> Result<StepOutcome> {
        let (loss, g) = loss_and_gradient(&self.params, batch, targets, kind)?;
        self.step_with_gradient(batch, targets, kind, loss, g)
    }

    fn step_with_gradient(
        &mut self,
        batch: &FeatureBatch,
        targets: ArrayView2<'_, f64>,
        kind: LossKind,
        loss: f64,
        g: HorizontalTangent,
    ) -> Result<StepOutcome> {
        let gradient_norm = g.norm();
        let (mut zeta, cg) = self.direction(batch, kind, &g)?;
        let mut descent = g.inner(&zeta)?;
        if !descent.is_finite() {
            return Err(FtnError::NonFinite("search direction".into()));
        }
        let outcome = |step_size, descent| StepOutcome { loss, step_size, descent, gradient_norm, cg };
        if gradient_norm == 0.0 && self.momentum.as_ref().is_none_or(|m| m.norm() == 0.0) {
            return Ok(outcome(0.0, descent));
        }
        if self.armijo.is_some() && descent <= 0.0 && self.momentum.is_some() {
            // Momentum can point uphill; restart it from the current
            // direction so the line search stays well posed.
            log::debug!("momentum is not a descent direction, restarting it");
            self.momentum = None;
            let (z, _) = self.direction_restart(batch, kind, &g)?;
            zeta = z;
            descent = g.inner(&zeta)?;
        }
        let (gamma, new_params) = match (&mut self.armijo, self.cfg.step) {
            (Some(search), _) => {
                let params = &self.params;
                let (gamma, _, p) = search.search(
                    |gamma| {
                        let p = qr_retract(params, &zeta, -gamma)?;
                        Ok((empirical_loss(&p, batch, targets, kind)?, p))
                    },
                    loss,
                    -descent,
                )?;
                (gamma, p)
            }
            (None, StepPolicy::Fixed(gamma)) => (gamma, qr_retract(&self.params, &zeta, -gamma)?),
            (None, StepPolicy::Armijo { .. }) => unreachable!("armijo state is created with the config"),
        };
        if let Some(m) = self.momentum.take() {
            self.momentum = Some(transport(&new_params, m.tangent())?);
        }
        self.params = new_params;
        Ok(outcome(gamma, descent))
    }

    /// Direction without momentum history (curvature averages are kept).
    fn direction_restart(
        &mut self,
        batch: &FeatureBatch,
        kind: LossKind,
        g: &HorizontalTangent,
    ) -> Result<(HorizontalTangent, Option<CgReport>)> {
        let beta1 = self.cfg.beta1;
        self.cfg.beta1 = 0.0;
        let scaled = match self.cfg.method {
            Method::DNgrad => {
                let blocks: Vec<DenseTensor> = self
                    .curvature
                    .iter()
                    .enumerate()
                    .map(|(k, avg)| {
                        let mut b = g.block(k).clone();
                        b.scale(1.0 / avg);
                        b
                    })
                    .collect();
                Ok((HorizontalTangent::new_unchecked(TangentTuple::new(blocks)), None))
            }
            _ => self.direction(batch, kind, g),
        };
        self.cfg.beta1 = beta1;
        scaled
    }
}

/// Returned by the [`run`] callback to continue or end the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Training and (optional) test data for [`run`].
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub kind: LossKind,
    pub train: &'a FeatureBatch,
    pub train_targets: ArrayView2<'a, f64>,
    pub test: Option<(&'a FeatureBatch, ArrayView2<'a, f64>)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Final iterate, or the best one seen if the run stopped early.
    pub params: TtnParams,
    pub trace: Vec<TraceRecord>,
    /// Why the run stopped before `max_iters`, if it did.
    pub stopped_early: Option<String>,
}

/// Runs `cfg.max_iters` steps from `params`, reporting each trace row to
/// `on_record` as soon as it is known; the callback may end the run early.
/// Row 0 is the initial point.
///
/// With `batch_size > 0` the training set is reshuffled every epoch with the
/// seeded generator and the reported loss is the loss on the current
/// mini-batch. A line-search failure ends the run and returns the best
/// iterate seen so far.
pub fn run<F>(cfg: &OptimizerConfig, params: TtnParams, data: TrainingData<'_>, mut on_record: F) -> Result<RunOutcome>
where
    F: FnMut(&TraceRecord) -> Result<Flow>,
{
    let mut opt = Optimizer::new(cfg.clone(), params)?;
    let m = data.train.len();
    if data.train_targets.nrows() != m {
        return Err(FtnError::Dimension(format!("{m} training inputs but {} targets", data.train_targets.nrows())));
    }
    let stochastic = cfg.batch_size > 0 && cfg.batch_size < m;
    let mut batch_rng = seeded(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut next_batch = |order: &mut Vec<usize>, cursor: &mut usize| -> Vec<usize> {
        if *cursor + cfg.batch_size > order.len() {
            *order = permutation(m, &mut batch_rng);
            *cursor = 0;
        }
        let idx = order[*cursor..*cursor + cfg.batch_size].to_vec();
        *cursor += cfg.batch_size;
        idx
    };
    let evaluate = |p: &TtnParams| -> Result<Option<f64>> {
        match data.test {
            Some((x, y)) if !x.is_empty() => Ok(Some(accuracy(p.forward(x)?.view(), y))),
            _ => Ok(None),
        }
    };

    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut elapsed = Duration::ZERO;
    let mut best: Option<(f64, TtnParams)> = None;
    let mut step_size = 0.0;
    let mut stopped_early = None;
    for it in 0..=cfg.max_iters {
        let t0 = Instant::now();
        let (batch_store, target_store);
        let (batch, targets) = if stochastic {
            let idx = next_batch(&mut order, &mut cursor);
            batch_store = data.train.select(&idx);
            target_store = data.train_targets.select(Axis(0), &idx);
            (&batch_store, target_store.view())
        } else {
            (data.train, data.train_targets.view())
        };
        let last = it == cfg.max_iters;
        let (loss, grad) = if last {
            (empirical_loss(opt.params(), batch, targets, data.kind)?, None)
        } else {
            let (l, g) = loss_and_gradient(opt.params(), batch, targets, data.kind)?;
            (l, Some(g))
        };
        elapsed += t0.elapsed();

        if !stochastic && best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, opt.params().clone()));
        }
        let test_accuracy = if it % cfg.eval_every == 0 || last { evaluate(opt.params())? } else { None };
        let rec = TraceRecord {
            iteration: it,
            seconds: elapsed.as_secs_f64(),
            train_loss: loss,
            step_size,
            test_accuracy,
            method: cfg.method,
        };
        let flow = on_record(&rec)?;
        trace.push(rec);
        let Some(g) = grad else { break };
        if flow == Flow::Stop {
            break;
        }

        let t0 = Instant::now();
        match opt.step_with_gradient(batch, targets, data.kind, loss, g) {
            Ok(out) => step_size = out.step_size,
            Err(FtnError::LineSearch(msg)) => {
                log::warn!("{} stopped at iteration {it}: {msg}", cfg.method);
                stopped_early = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
        elapsed += t0.elapsed();
    }
    let params = match (stopped_early.is_some(), best) {
        (true, Some((_, p))) => p,
        _ => opt.into_params(),
    };
    Ok(RunOutcome { params, trace, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{eval_features, FeatureFamily};
    use crate::random::std_normal;
    use crate::topology::{BondDims, TreeTopology};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    struct Problem {
        params: TtnParams,
        batch: FeatureBatch,
        targets: Array2<f64>,
    }

    fn problem(d: usize, n0: usize, m: usize, kind: LossKind, seed: u64) -> Problem {
        let topo = TreeTopology::requested(&vec![3; d], n0, &BondDims::Uniform(3))
            .unwrap()
            .clamp_bond_dims();
        let fam = FeatureFamily::Legendre { degree: 2 };
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        let batch = eval_features(&fam, x.view()).unwrap();
        let params = TtnParams::random_init(&topo, &batch, seed).unwrap();
        let targets = match kind {
            LossKind::LeastSquares => Array2::from_shape_fn((m, n0), |_| std_normal(&mut rng)),
            LossKind::MultinomialLogistic => {
                let mut y = Array2::zeros((m, n0));
                for i in 0..m {
                    y[[i, rng.gen_range(0..n0)]] = 1.0;
                }
                y
            }
        };
        Problem { params, batch, targets }
    }

    fn random_horizontal(params: &TtnParams, rng: &mut FtnRng) -> HorizontalTangent {
        let t = TangentTuple::new(
            params
                .cores()
                .iter()
                .map(|c| DenseTensor::new(c.shape().to_vec(), (0..c.len()).map(|_| std_normal(rng)).collect()).unwrap())
                .collect(),
        );
        horizontal_project(params, &t).unwrap()
    }

    #[test]
    fn armijo_accepts_then_stops_doubling() {
        let mut s = ArmijoSearch::new(1e-4, 1.0);
        let (g, v, _) = s.search(|g| Ok(((1.0 - g) * (1.0 - g), ())), 1.0, -2.0).unwrap();
        assert_eq!(g, 1.0);
        assert_eq!(v, 0.0);
        assert_eq!(s.gamma, 1.0);
    }

    #[test]
    fn armijo_halves_when_initial_fails() {
        let mut s = ArmijoSearch::new(1e-4, 8.0);
        let (g, _, _) = s.search(|g| Ok(((1.0 - g) * (1.0 - g), ())), 1.0, -2.0).unwrap();
        assert_eq!(g, 1.0);
        // remembered for the next call
        let (g, _, _) = s.search(|g| Ok(((1.0 - g) * (1.0 - g), ())), 1.0, -2.0).unwrap();
        assert_eq!(g, 1.0);
    }

    #[test]
    fn armijo_doubling_cap() {
        let mut s = ArmijoSearch::new(1e-4, 1.0);
        let (g, _, _) = s.search(|g| Ok((1.0 - g, ())), 1.0, -1.0).unwrap();
        assert_eq!(g, 1024.0);
    }

    #[test]
    fn armijo_failures() {
        let mut s = ArmijoSearch::new(1e-4, 1.0);
        assert!(matches!(s.search(|g| Ok((1.0 + g, ())), 1.0, -1.0), Err(FtnError::LineSearch(_))));
        assert!(matches!(s.search(|_| Ok((0.0, ())), 1.0, 0.5), Err(FtnError::LineSearch(_))));
        // evaluation errors are rejected trials
        let (g, _, _) = s
            .search(|g| if g > 0.3 { Err(FtnError::NonFinite("x".into())) } else { Ok((1.0 - g, ())) }, 1.0, -1.0)
            .unwrap();
        assert_eq!(g, 0.25);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in [LossKind::LeastSquares, LossKind::MultinomialLogistic] {
            let p = problem(4, 3, 20, kind, 1);
            let (_, g) = loss_and_gradient(&p.params, &p.batch, p.targets.view(), kind).unwrap();
            let mut rng = seeded(2);
            for _ in 0..5 {
                let dir = random_horizontal(&p.params, &mut rng);
                let h = 1e-5;
                let f = |s: f64| {
                    let mut cores = p.params.cores().to_vec();
                    for (c, d) in cores.iter_mut().zip(dir.tangent().blocks()) {
                        c.axpy(s, d);
                    }
                    let q = TtnParams::new(p.params.topology().clone(), cores).unwrap();
                    empirical_loss(&q, &p.batch, p.targets.view(), kind).unwrap()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let an = g.inner(&dir).unwrap();
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{kind}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_interpolation_and_is_linear_in_residual() {
        let p = problem(4, 2, 10, LossKind::LeastSquares, 3);
        let out = p.params.forward(&p.batch).unwrap();
        let g0 = riemannian_gradient(&p.params, &p.batch, out.view(), LossKind::LeastSquares).unwrap();
        assert!(g0.norm() <= 1e-14);
        let y1 = &out - &p.targets;
        let y1 = &out - &y1; // = targets
        let g1 = riemannian_gradient(&p.params, &p.batch, y1.view(), LossKind::LeastSquares).unwrap();
        let y3 = &out - &((&out - &p.targets) * 3.0);
        let g3 = riemannian_gradient(&p.params, &p.batch, y3.view(), LossKind::LeastSquares).unwrap();
        assert_abs_diff_eq!(
            ndarray::Array1::from(g3.tangent().flatten()),
            ndarray::Array1::from(g1.tangent().flatten()) * 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn natural_directions_descend() {
        for method in [Method::Ngrad, Method::BdNgrad, Method::BdoNgrad, Method::DNgrad] {
            let p = problem(4, 3, 30, LossKind::MultinomialLogistic, 4);
            let cfg = OptimizerConfig { method, ..Default::default() };
            let mut opt = Optimizer::new(cfg, p.params).unwrap();
            for _ in 0..3 {
                let before = empirical_loss(opt.params(), &p.batch, p.targets.view(), LossKind::MultinomialLogistic).unwrap();
                let out = opt.step(&p.batch, p.targets.view(), LossKind::MultinomialLogistic).unwrap();
                assert!(out.descent > 0.0, "{method}");
                let after = empirical_loss(opt.params(), &p.batch, p.targets.view(), LossKind::MultinomialLogistic).unwrap();
                assert!(after <= before);
                assert!(opt.params().stiefel_defect() <= 1e-10);
            }
        }
    }

    #[test]
    fn block_diagonal_is_ngrad_for_single_node() {
        let p = problem(2, 3, 15, LossKind::MultinomialLogistic, 5);
        let g = riemannian_gradient(&p.params, &p.batch, p.targets.view(), LossKind::MultinomialLogistic).unwrap();
        let dir = |method| {
            let cfg = OptimizerConfig { method, cg_tol: 1e-12, ..Default::default() };
            let mut opt = Optimizer::new(cfg, p.params.clone()).unwrap();
            opt.direction(&p.batch, LossKind::MultinomialLogistic, &g).unwrap().0
        };
        assert_abs_diff_eq!(
            ndarray::Array1::from(dir(Method::Ngrad).tangent().flatten()),
            ndarray::Array1::from(dir(Method::BdNgrad).tangent().flatten()),
            epsilon = 1e-9
        );
    }

    #[test]
    fn d_ngrad_without_momentum_is_scaled_gradient() {
        let p = problem(4, 2, 6, LossKind::LeastSquares, 6);
        let zeros = FeatureBatch::new(p.batch.modes().iter().map(|a| Array2::zeros(a.dim())).collect()).unwrap();
        let cfg = OptimizerConfig {
            method: Method::DNgrad,
            beta1: 0.0,
            beta2: 0.0,
            lambda: 0.25,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, p.params.clone()).unwrap();
        let g = random_horizontal(&p.params, &mut seeded(7));
        let (z, _) = opt.direction(&zeros, LossKind::LeastSquares, &g).unwrap();
        assert_abs_diff_eq!(
            ndarray::Array1::from(z.tangent().flatten()),
            ndarray::Array1::from(g.tangent().flatten()) * 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn curvature_average_closed_form() {
        let p = problem(4, 2, 6, LossKind::LeastSquares, 8);
        let zeros = FeatureBatch::new(p.batch.modes().iter().map(|a| Array2::zeros(a.dim())).collect()).unwrap();
        let lam = 0.3;
        let cfg = OptimizerConfig { method: Method::DNgrad, beta1: 0.5, beta2: 0.9, lambda: lam, ..Default::default() };
        let mut opt = Optimizer::new(cfg, p.params.clone()).unwrap();
        let g = random_horizontal(&p.params, &mut seeded(9));
        for t in 1..=7 {
            opt.direction(&zeros, LossKind::LeastSquares, &g).unwrap();
            let expect = 0.9f64.powi(t) + lam * (1.0 - 0.9f64.powi(t));
            for &a in opt.curvature_averages() {
                assert_abs_diff_eq!(a, expect, epsilon = 1e-12);
            }
        }
        // a zero block keeps its average
        let mut opt = Optimizer::new(opt.config().clone(), p.params.clone()).unwrap();
        let g0 = g.restricted_to(0);
        opt.direction(&zeros, LossKind::LeastSquares, &g0).unwrap();
        assert_abs_diff_eq!(opt.curvature_averages()[0], 0.9 + 0.1 * lam, epsilon = 1e-12);
        assert_eq!(opt.curvature_averages()[1], 1.0);
    }

    #[test]
    fn transported_momentum_is_horizontal() {
        let p = problem(4, 3, 64, LossKind::MultinomialLogistic, 10);
        let cfg = OptimizerConfig {
            method: Method::DNgrad,
            beta1: 0.9,
            step: StepPolicy::Fixed(0.5),
            batch_size: 16,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, p.params).unwrap();
        for _ in 0..4 {
            opt.step(&p.batch, p.targets.view(), LossKind::MultinomialLogistic).unwrap();
            let m = opt.momentum().unwrap();
            assert!(crate::geometry::horizontal_defect(opt.params(), m.tangent()) <= 1e-10);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = problem(4, 2, 10, LossKind::LeastSquares, 11);
        let out = p.params.forward(&p.batch).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), p.params.clone()).unwrap();
        let o = opt.step(&p.batch, out.view(), LossKind::LeastSquares).unwrap();
        assert_eq!(o.step_size, 0.0);
        assert_eq!(opt.params().cores(), p.params.cores());
    }

    #[test]
    fn run_is_monotone_and_deterministic() {
        let p = problem(4, 2, 40, LossKind::LeastSquares, 12);
        let data = TrainingData { kind: LossKind::LeastSquares, train: &p.batch, train_targets: p.targets.view(), test: None };
        let cfg = OptimizerConfig { method: Method::Grad, max_iters: 15, ..Default::default() };
        let a = run(&cfg, p.params.clone(), data, |_| Ok(Flow::Continue)).unwrap();
        assert_eq!(a.trace.len(), 16);
        for w in a.trace.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss);
        }
        let b = run(&cfg, p.params.clone(), data, |_| Ok(Flow::Continue)).unwrap();
        let strip = |t: &[TraceRecord]| t.iter().map(|r| (r.train_loss.to_bits(), r.step_size.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a.trace), strip(&b.trace));

        let cfg0 = OptimizerConfig { max_iters: 0, ..cfg };
        let c = run(&cfg0, p.params.clone(), data, |_| Ok(Flow::Continue)).unwrap();
        assert_eq!(c.trace.len(), 1);
        assert_eq!(c.trace[0].step_size, 0.0);
    }

    #[test]
    fn stochastic_run_is_deterministic_and_evaluates() {
        let p = problem(4, 3, 50, LossKind::MultinomialLogistic, 13);
        let data = TrainingData {
            kind: LossKind::MultinomialLogistic,
            train: &p.batch,
            train_targets: p.targets.view(),
            test: Some((&p.batch, p.targets.view())),
        };
        let cfg = OptimizerConfig {
            method: Method::DNgrad,
            step: StepPolicy::Fixed(1.0),
            beta1: 0.9,
            batch_size: 16,
            max_iters: 12,
            eval_every: 5,
            ..Default::default()
        };
        let a = run(&cfg, p.params.clone(), data, |_| Ok(Flow::Continue)).unwrap();
        let b = run(&cfg, p.params.clone(), data, |_| Ok(Flow::Continue)).unwrap();
        assert_eq!(a.params.cores(), b.params.cores());
        let evaluated: Vec<usize> = a.trace.iter().filter(|r| r.test_accuracy.is_some()).map(|r| r.iteration).collect();
        assert_eq!(evaluated, vec![0, 5, 10, 12]);
    }

    #[test]
    fn config_validation_and_method_names() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { step: StepPolicy::Fixed(0.0), ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("newton".parse::<Method>().is_err());
    }
}

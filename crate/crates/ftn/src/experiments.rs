//! Experiment drivers shared by the command line and the acceptance suite.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ftn_core::data::{block_order, downscale, gen_recovery, load_csv, load_idx, split, Dataset, DIGITS_MAX};
use ftn_core::features::{eval_features, FeatureBatch, FeatureFamily};
use ftn_core::losses::LossKind;
use ftn_core::model::TtnParams;
use ftn_core::optimizers::{run, Flow, Method, OptimizerConfig, TraceRecord, TrainingData};
use ftn_core::topology::{BondDims, TreeTopology};

use crate::config::{Experiment, Settings};
use crate::CliError;

/// Seed offset separating the initial point from the data and ground truth.
const INIT_SEED_OFFSET: u64 = 1000;

/// Incremental trace CSV writer with the stable column schema.
pub struct TraceWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl TraceWriter {
    pub const HEADER: [&'static str; 6] = ["iter", "seconds", "train_loss", "step_size", "test_accuracy", "method"];

    pub fn create(path: &Path) -> Result<Self, CliError> {
        let mut inner = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        inner.write_record(Self::HEADER).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &TraceRecord) -> Result<(), CliError> {
        self.inner
            .write_record([
                r.iteration.to_string(),
                format!("{:.6}", r.seconds),
                format!("{:.10e}", r.train_loss),
                format!("{:e}", r.step_size),
                r.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
                r.method.to_string(),
            ])
            .map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}

fn prepare_output(settings: &Settings, out_dir: Option<&Path>) -> Result<Option<PathBuf>, CliError> {
    let Some(dir) = out_dir else { return Ok(None) };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.ini"), settings.echo())?;
    Ok(Some(dir.to_path_buf()))
}

fn save_checkpoint(params: &TtnParams, path: &Path) -> Result<(), CliError> {
    params.write_checkpoint(BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// Runs one optimizer configuration, streaming its trace to `csv_path`.
/// `stop` ends the run early once it returns true for a record.
pub fn traced_run(
    cfg: &OptimizerConfig,
    init: TtnParams,
    data: TrainingData<'_>,
    csv_path: Option<&Path>,
    mut stop: impl FnMut(&TraceRecord) -> bool,
) -> Result<ftn_core::optimizers::RunOutcome, CliError> {
    let mut writer = csv_path.map(TraceWriter::create).transpose()?;
    let mut write_err = None;
    let outcome = run(cfg, init, data, |rec| {
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.write(rec) {
                write_err = Some(e);
                return Ok(Flow::Stop);
            }
        }
        Ok(if stop(rec) { Flow::Stop } else { Flow::Continue })
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct RecoveryRun {
    pub basis: FeatureFamily,
    pub method: Method,
    pub trace: Vec<TraceRecord>,
    /// First iteration whose training loss is at or below the threshold.
    pub iters_to_threshold: Option<usize>,
    pub final_loss: f64,
    pub stopped_early: Option<String>,
    pub params: TtnParams,
}

#[derive(Debug, Clone)]
pub struct RecoveryReport {
    /// `threshold-factor * n_0 * noise-var`: the expected loss floor with slack.
    pub threshold: f64,
    pub runs: Vec<RecoveryRun>,
}

impl RecoveryReport {
    pub fn find(&self, basis: &FeatureFamily, method: Method) -> Option<&RecoveryRun> {
        self.runs.iter().find(|r| &r.basis == basis && r.method == method)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("loss threshold {:.6e}\n", self.threshold);
        let _ = writeln!(s, "{:<20} {:<10} {:>14} {:>10} {:>10}", "basis", "method", "final_loss", "iters", "to_floor");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<20} {:<10} {:>14.6e} {:>10} {:>10}",
                r.basis.to_string(),
                r.method.to_string(),
                r.final_loss,
                r.trace.last().map_or(0, |t| t.iteration),
                r.iters_to_threshold.map_or("-".to_string(), |i| i.to_string())
            );
        }
        s
    }
}

/// Recovery of a random ground-truth network from noisy samples, for every
/// configured basis and method. All runs start from the same function: the
/// initial point is drawn in the monomial basis and re-expressed in each
/// basis by a change of basis.
pub fn recovery(settings: &Settings, out_dir: Option<&Path>) -> Result<RecoveryReport, CliError> {
    let seed = settings.seed()?;
    let m: usize = settings.get("samples")?;
    let d: usize = settings.get("inputs")?;
    let degree: usize = settings.get("degree")?;
    let n0: usize = settings.get("outputs")?;
    let noise: f64 = settings.get("noise-var")?;
    let bond = settings.bond_dims()?;
    let bases = settings.bases(degree)?;
    let methods = settings.methods()?;
    let factor: f64 = settings.get("threshold-factor")?;
    let stop_at_threshold: bool = settings.get("stop-at-threshold")?;
    let cfgs = methods.iter().map(|&mth| settings.optimizer(mth)).collect::<Result<Vec<_>, _>>()?;
    let out = prepare_output(settings, out_dir)?;

    let (data, _) = gen_recovery(seed, m, d, degree, &bond, n0, noise).map_err(config_or_numeric)?;
    let mono = FeatureFamily::Monomial { degree };
    let topo = TreeTopology::build_balanced(&vec![degree + 1; d], n0, &bond).map_err(config_or_numeric)?;
    let init_mono = TtnParams::random_init(&topo, &eval_features(&mono, data.inputs.view())?, seed + INIT_SEED_OFFSET)?;
    let threshold = factor * n0 as f64 * noise;

    let mut runs = Vec::new();
    for basis in &bases {
        let transform = mono.transform_to(basis).map_err(config_or_numeric)?;
        let init = init_mono.change_of_basis(&vec![transform; d])?;
        let features = eval_features(basis, data.inputs.view())?;
        let train = TrainingData {
            kind: LossKind::LeastSquares,
            train: &features,
            train_targets: data.targets.view(),
            test: None,
        };
        for cfg in &cfgs {
            let tag = format!("{}_{}", cfg.method, basis);
            log::info!("recovery: {tag}");
            let mut reached = None;
            let csv = out.as_ref().map(|o| o.join(format!("trace_{tag}.csv")));
            let outcome = traced_run(cfg, init.clone(), train, csv.as_deref(), |rec| {
                if reached.is_none() && rec.train_loss <= threshold {
                    reached = Some(rec.iteration);
                }
                stop_at_threshold && reached.is_some()
            })?;
            if let Some(o) = &out {
                save_checkpoint(&outcome.params, &o.join(format!("final_{tag}.ftnc")))?;
            }
            runs.push(RecoveryRun {
                basis: *basis,
                method: cfg.method,
                final_loss: outcome.trace.last().map_or(f64::NAN, |r| r.train_loss),
                iters_to_threshold: reached,
                stopped_early: outcome.stopped_early,
                trace: outcome.trace,
                params: outcome.params,
            });
        }
    }
    let report = RecoveryReport { threshold, runs };
    if let Some(o) = &out {
        fs::write(o.join("summary.txt"), report.summary())?;
    }
    Ok(report)
}

/// Train/test data of a classification run, already split.
#[derive(Debug, Clone)]
pub struct ClassifyData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_classification_data(settings: &Settings) -> Result<ClassifyData, CliError> {
    let dataset: String = settings.get("dataset")?;
    let mut full = match dataset.as_str() {
        "digits" | "csv" => load_csv(&settings.get::<PathBuf>("path")?, None, DIGITS_MAX, 10).map_err(config_or_numeric)?,
        "mnist" | "idx" => {
            let (mut ds, (h, w)) = load_idx(&settings.get::<PathBuf>("images")?, &settings.get::<PathBuf>("labels")?)
                .map_err(config_or_numeric)?;
            let size: usize = settings.get("image-size")?;
            if size != h || size != w {
                ds.inputs = downscale(&ds.inputs, h, w, size).map_err(config_or_numeric)?;
            }
            ds
        }
        other => return Err(CliError::Config(format!("unknown dataset '{other}'"))),
    };
    match settings.get::<String>("pixel-order")?.as_str() {
        "row-major" => {}
        "blocks" => {
            let side = (full.input_dim() as f64).sqrt().round() as usize;
            if side * side != full.input_dim() {
                return Err(CliError::Config(format!("block order needs square images, got {} pixels", full.input_dim())));
            }
            let order = block_order(side).map_err(config_or_numeric)?;
            full.inputs = full.inputs.select(ndarray::Axis(1), &order);
        }
        other => return Err(CliError::Config(format!("unknown pixel order '{other}'"))),
    }
    let limit: usize = settings.get("limit")?;
    if limit > 0 && limit < full.len() {
        full = full.select(&(0..limit).collect::<Vec<_>>());
    }
    let (train, test) = split(&full, settings.get("train-fraction")?, settings.seed()?).map_err(config_or_numeric)?;
    Ok(ClassifyData { train, test })
}

#[derive(Debug, Clone)]
pub struct ClassifyRun {
    pub method: Method,
    pub trace: Vec<TraceRecord>,
    pub final_accuracy: f64,
    pub stopped_early: Option<String>,
    pub params: TtnParams,
}

impl ClassifyRun {
    /// First evaluated iteration with test accuracy at least `level`.
    pub fn iters_to_accuracy(&self, level: f64) -> Option<usize> {
        self.trace
            .iter()
            .find(|r| r.test_accuracy.is_some_and(|a| a >= level))
            .map(|r| r.iteration)
    }
}

#[derive(Debug, Clone)]
pub struct ClassifyReport {
    pub dataset: String,
    pub runs: Vec<ClassifyRun>,
}

impl ClassifyReport {
    pub fn find(&self, method: Method) -> Option<&ClassifyRun> {
        self.runs.iter().find(|r| r.method == method)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("final test accuracies on {}\n", self.dataset);
        let _ = writeln!(s, "{:<10} {:>14} {:>14} {:>8} {:>10}", "method", "test_accuracy", "train_loss", "iters", "seconds");
        for r in &self.runs {
            let last = r.trace.last();
            let _ = writeln!(
                s,
                "{:<10} {:>13.2}% {:>14.6e} {:>8} {:>10.1}",
                r.method.to_string(),
                100.0 * r.final_accuracy,
                last.map_or(f64::NAN, |t| t.train_loss),
                last.map_or(0, |t| t.iteration),
                last.map_or(0.0, |t| t.seconds)
            );
        }
        s
    }
}

/// Topology, features and random initial point for a classification run.
pub fn classification_model(
    settings: &Settings,
    data: &ClassifyData,
) -> Result<(FeatureBatch, FeatureBatch, TtnParams), CliError> {
    let family = FeatureFamily::parse(&settings.get::<String>("family")?, 1).map_err(config_or_numeric)?;
    let train = eval_features(&family, data.train.inputs.view())?;
    let test = eval_features(&family, data.test.inputs.view())?;
    let d = data.train.input_dim();
    let topo = TreeTopology::requested(&vec![family.dim(); d], data.train.output_dim(), &BondDims::Uniform(settings.get("max-rank")?))
        .map_err(config_or_numeric)?
        .clamp_bond_dims();
    let init = TtnParams::random_init(&topo, &train, settings.seed()? + INIT_SEED_OFFSET)?;
    Ok((train, test, init))
}

/// Multinomial logistic regression with every configured method from a
/// shared random orthonormal initial point.
pub fn classify(settings: &Settings, out_dir: Option<&Path>) -> Result<ClassifyReport, CliError> {
    let methods = settings.methods()?;
    let cfgs = methods.iter().map(|&mth| settings.optimizer(mth)).collect::<Result<Vec<_>, _>>()?;
    let data = load_classification_data(settings)?;
    let out = prepare_output(settings, out_dir)?;
    let (train, test, init) = classification_model(settings, &data)?;
    let td = TrainingData {
        kind: LossKind::MultinomialLogistic,
        train: &train,
        train_targets: data.train.targets.view(),
        test: Some((&test, data.test.targets.view())),
    };
    let mut runs = Vec::new();
    for cfg in &cfgs {
        log::info!("classify: {} on {} training samples", cfg.method, data.train.len());
        let csv = out.as_ref().map(|o| o.join(format!("trace_{}.csv", cfg.method)));
        let outcome = traced_run(cfg, init.clone(), td, csv.as_deref(), |_| false)?;
        if let Some(o) = &out {
            save_checkpoint(&outcome.params, &o.join(format!("final_{}.ftnc", cfg.method)))?;
        }
        let final_accuracy = outcome.trace.iter().rev().find_map(|r| r.test_accuracy).unwrap_or(f64::NAN);
        runs.push(ClassifyRun {
            method: cfg.method,
            trace: outcome.trace,
            final_accuracy,
            stopped_early: outcome.stopped_early,
            params: outcome.params,
        });
    }
    let report = ClassifyReport { dataset: data.train.name.clone(), runs };
    if let Some(o) = &out {
        fs::write(o.join("summary.txt"), report.summary())?;
    }
    Ok(report)
}

/// One grid point: the value tried and its score, or `None` if the run
/// failed numerically.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub value: String,
    pub method: Method,
    pub score: Option<f64>,
}

/// Runs the experiment once per value of `param` and scores every method:
/// final test accuracy for classification (higher is better), final
/// training loss for recovery (lower is better).
pub fn grid_search(settings: &Settings, param: &str, values: &[String], out_dir: Option<&Path>) -> Result<Vec<GridPoint>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("grid search needs at least one value".into()));
    }
    let out = prepare_output(settings, out_dir)?;
    let mut points = Vec::new();
    for v in values {
        let mut s = settings.clone();
        s.set(param, v)?;
        let methods = s.methods()?;
        let sub = out.as_ref().map(|o| o.join(format!("{param}={v}")));
        let scored: Result<Vec<(Method, f64)>, CliError> = match s.experiment() {
            Experiment::Classify => {
                classify(&s, sub.as_deref()).map(|r| r.runs.iter().map(|x| (x.method, x.final_accuracy)).collect())
            }
            Experiment::Recovery => recovery(&s, sub.as_deref()).map(|r| r.runs.iter().map(|x| (x.method, x.final_loss)).collect()),
        };
        match scored {
            Ok(list) => points.extend(list.into_iter().map(|(method, sc)| GridPoint {
                value: v.clone(),
                method,
                score: sc.is_finite().then_some(sc),
            })),
            Err(CliError::Numerical(e)) => {
                log::warn!("{param}={v} failed: {e}");
                points.extend(methods.into_iter().map(|method| GridPoint { value: v.clone(), method, score: None }));
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(o) = &out {
        let mut w = csv::Writer::from_path(o.join("grid.csv")).map_err(csv_err)?;
        w.write_record([param, "method", "score"]).map_err(csv_err)?;
        for p in &points {
            w.write_record([p.value.clone(), p.method.to_string(), p.score.map(|x| x.to_string()).unwrap_or_default()])
                .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(points)
}

/// The best value per method from a grid.
pub fn best_per_method(experiment: Experiment, points: &[GridPoint]) -> Vec<(Method, String, f64)> {
    let mut best: Vec<(Method, String, f64)> = Vec::new();
    for p in points {
        let Some(sc) = p.score else { continue };
        let better = |old: f64| match experiment {
            Experiment::Classify => sc > old,
            Experiment::Recovery => sc < old,
        };
        match best.iter_mut().find(|b| b.0 == p.method) {
            Some(b) if better(b.2) => *b = (p.method, p.value.clone(), sc),
            Some(_) => {}
            None => best.push((p.method, p.value.clone(), sc)),
        }
    }
    best
}

/// Input problems (missing files, bad values) are configuration errors;
/// everything else is numerical.
fn config_or_numeric(e: ftn_core::FtnError) -> CliError {
    use ftn_core::FtnError as E;
    match e {
        E::Io(_) | E::Format(_) | E::InvalidArgument(_) | E::Topology(_) => CliError::Config(e.to_string()),
        other => CliError::Numerical(other),
    }
}

//! Flat INI-style run configuration.
//!
//! Keys are unique across sections, so a file may group them freely and any
//! key can be overridden by a command-line flag of the same name. The
//! resolved settings (defaults filled in) are echoed next to every run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ftn_core::features::FeatureFamily;
use ftn_core::optimizers::{Method, OptimizerConfig, StepPolicy};
use ftn_core::topology::BondDims;
use ini::Ini;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Recovery,
    Classify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Recovery => "recovery",
            Experiment::Classify => "classify",
        }
    }
}

struct Key {
    name: &'static str,
    section: &'static str,
    recovery: Option<&'static str>,
    classify: Option<&'static str>,
}

const fn key(
    name: &'static str,
    section: &'static str,
    recovery: Option<&'static str>,
    classify: Option<&'static str>,
) -> Key {
    Key { name, section, recovery, classify }
}

const NONE: Option<&str> = None;

/// Every accepted key with its per-experiment default. `Some("")` marks a
/// key that is accepted but unset by default; `None` marks a key that does
/// not apply to the experiment.
const KEYS: &[Key] = &[
    key("experiment", "run", Some("recovery"), Some("classify")),
    key("seed", "run", Some("0"), Some("0")),
    key("output-dir", "run", Some("runs/recovery"), Some("runs/classify")),
    key("threads", "run", Some("0"), Some("0")),
    key("samples", "data", Some("256"), NONE),
    key("inputs", "data", Some("4"), NONE),
    key("degree", "data", Some("2"), NONE),
    key("outputs", "data", Some("3"), NONE),
    key("noise-var", "data", Some("2.5e-3"), NONE),
    key("dataset", "data", NONE, Some("digits")),
    key("path", "data", NONE, Some("data/digits.csv")),
    key("images", "data", NONE, Some("data/mnist10k-images-idx3-ubyte.gz")),
    key("labels", "data", NONE, Some("data/mnist10k-labels-idx1-ubyte.gz")),
    key("image-size", "data", NONE, Some("16")),
    key("limit", "data", NONE, Some("0")),
    key("train-fraction", "data", NONE, Some("0.8")),
    key("pixel-order", "data", NONE, Some("blocks")),
    key("bases", "model", Some("monomial,legendre,hermite"), NONE),
    key("bond-dims", "model", Some("5,5"), NONE),
    key("max-rank", "model", NONE, Some("8")),
    key("family", "model", NONE, Some("normalized-affine")),
    key("methods", "optimizer", Some("grad,ngrad"), Some("bd-ngrad")),
    key("max-iters", "optimizer", Some("500"), Some("500")),
    key("armijo", "optimizer", Some(""), Some("")),
    key("fixed-step", "optimizer", Some(""), Some("")),
    key("initial-step", "optimizer", Some("1"), Some("0.01")),
    key("armijo-c", "optimizer", Some("1e-4"), Some("1e-4")),
    key("beta1", "optimizer", Some("0"), Some("0")),
    key("beta2", "optimizer", Some("0.9"), Some("0.9")),
    key("lambda", "optimizer", Some("5e-3"), Some("5e-3")),
    key("batch-size", "optimizer", Some("0"), Some("0")),
    key("cg-tol", "optimizer", Some("1e-6"), Some("1e-6")),
    key("cg-max-iter", "optimizer", Some("250"), Some("250")),
    key("eval-every", "optimizer", Some("10"), Some("10")),
    key("threshold-factor", "optimizer", Some("1.1"), NONE),
    key("stop-at-threshold", "optimizer", Some("false"), NONE),
];

/// Names of all configuration keys, for building command-line flags.
pub fn key_names() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.name)
}

fn default_for(exp: Experiment, k: &Key) -> Option<&'static str> {
    match exp {
        Experiment::Recovery => k.recovery,
        Experiment::Classify => k.classify,
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Resolved key-value settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    experiment: Experiment,
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn defaults(experiment: Experiment) -> Self {
        let values = KEYS
            .iter()
            .filter_map(|k| default_for(experiment, k).map(|v| (k.name, v.to_string())))
            .collect();
        Self { experiment, values }
    }

    pub fn experiment(&self) -> Experiment {
        self.experiment
    }

    /// Parses INI text on top of the defaults.
    pub fn from_ini_str(experiment: Experiment, text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        let mut s = Self::defaults(experiment);
        let mut seen = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                if let Some(prev) = seen.insert(k.to_string(), section.unwrap_or("").to_string()) {
                    return Err(config_err(format!(
                        "key '{k}' given twice (sections '{prev}' and '{}')",
                        section.unwrap_or("")
                    )));
                }
                s.set(k, v)?;
            }
        }
        Ok(s)
    }

    pub fn load(experiment: Experiment, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_ini_str(experiment, &text)
    }

    /// Sets one key; unknown keys and keys of the other experiment fail.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| config_err(format!("unknown key '{key}'")))?;
        if default_for(self.experiment, k).is_none() {
            return Err(config_err(format!("key '{key}' does not apply to {}", self.experiment.name())));
        }
        if k.name == "experiment" && value.trim() != self.experiment.name() {
            return Err(config_err(format!(
                "config is for '{}' but the '{}' command was used",
                value.trim(),
                self.experiment.name()
            )));
        }
        self.values.insert(k.name, value.trim().to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).ok_or_else(|| config_err(format!("missing value for '{key}'")))?;
        raw.parse::<T>().map_err(|e| config_err(format!("bad value '{raw}' for '{key}': {e}")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .unwrap_or("")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// INI text of all resolved settings.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for section in ["run", "data", "model", "optimizer"] {
            let _ = writeln!(out, "[{section}]");
            for k in KEYS.iter().filter(|k| k.section == section) {
                if let Some(v) = self.values.get(k.name) {
                    let _ = writeln!(out, "{} = {}", k.name, v);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn output_dir(&self) -> Result<PathBuf, CliError> {
        self.get("output-dir")
    }

    pub fn threads(&self) -> Result<usize, CliError> {
        self.get("threads")
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        let methods: Vec<Method> = self
            .list("methods")
            .iter()
            .map(|m| m.parse().map_err(|e: ftn_core::FtnError| config_err(e.to_string())))
            .collect::<Result<_, _>>()?;
        if methods.is_empty() {
            return Err(config_err("no methods selected"));
        }
        Ok(methods)
    }

    /// Optimizer settings for `method`.
    pub fn optimizer(&self, method: Method) -> Result<OptimizerConfig, CliError> {
        let armijo: Option<bool> = self.opt("armijo")?;
        let fixed: Option<f64> = self.opt("fixed-step")?;
        let step = match (armijo, fixed) {
            (Some(true), Some(_)) => return Err(config_err("'armijo' and 'fixed-step' are mutually exclusive")),
            (_, Some(g)) => StepPolicy::Fixed(g),
            (Some(false), None) => return Err(config_err("'armijo = false' requires 'fixed-step'")),
            (_, None) => StepPolicy::Armijo {
                c: self.get("armijo-c")?,
                initial: self.get("initial-step")?,
            },
        };
        let cfg = OptimizerConfig {
            method,
            step,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            lambda: self.get("lambda")?,
            batch_size: self.get("batch-size")?,
            max_iters: self.get("max-iters")?,
            seed: self.seed()?,
            cg_tol: self.get("cg-tol")?,
            cg_max_iter: self.get("cg-max-iter")?,
            eval_every: self.get("eval-every")?,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn bases(&self, degree: usize) -> Result<Vec<FeatureFamily>, CliError> {
        let bases: Vec<FeatureFamily> = self
            .list("bases")
            .iter()
            .map(|b| FeatureFamily::parse(b, degree).map_err(|e| config_err(e.to_string())))
            .collect::<Result<_, _>>()?;
        if bases.is_empty() {
            return Err(config_err("no bases selected"));
        }
        Ok(bases)
    }

    pub fn bond_dims(&self) -> Result<BondDims, CliError> {
        let dims: Vec<usize> = self
            .list("bond-dims")
            .iter()
            .map(|v| v.parse().map_err(|_| config_err(format!("bad bond dimension '{v}'"))))
            .collect::<Result<_, _>>()?;
        match dims.as_slice() {
            [] => Err(config_err("no bond dimensions given")),
            [r] => Ok(BondDims::Uniform(*r)),
            _ => Ok(BondDims::PerNode(dims)),
        }
    }
}

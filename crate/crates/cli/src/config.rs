//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Unknown
//! or repeated keys are errors so that typos never silently fall back to a
//! default.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use srf_core::data::{DgpKind, DgpSpec};
use srf_core::family::Family;
use srf_core::model::{BasisKind, Fluctuation, ModelConfig};
use srf_core::shifts::ShiftFamily;
use srf_core::training::TrainConfig;

use crate::CliError;

/// Which estimators a benchmark reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EstimatorKind {
    Plugin = 0,
    Aipw = 1,
    Tr = 2,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::Tr => "tr",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "plugin" => Ok(EstimatorKind::Plugin),
            "aipw" => Ok(EstimatorKind::Aipw),
            "tr" => Ok(EstimatorKind::Tr),
            other => Err(format!("unknown estimator `{other}` (expected plugin, aipw or tr)")),
        }
    }
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generator {
        kind: DgpKind,
        n: usize,
        noise: Option<f64>,
        seed: u64,
    },
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub data_family: Family,
    pub shifts: Option<ShiftFamily>,
    /// Outcome family of the model; defaults to the data family.
    pub model_family: Option<Family>,
    pub basis: BasisKind,
    pub backbone: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub ratio_bound: f64,
    pub fluctuation: Fluctuation,
    pub train: TrainConfig,
    pub estimators: Vec<EstimatorKind>,
    /// Benchmark sweep axes; empty means "use the single-run setting".
    pub bases: Vec<BasisKind>,
    pub model_families: Vec<Family>,
    pub seeds: usize,
    pub out_dir: PathBuf,
    pub model_path: Option<PathBuf>,
    pub ensemble_size: usize,
    /// Gives every ensemble member its own seed; off reproduces one member B times.
    pub ensemble_vary_seed: bool,
    pub percent_change: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1, Family::Gaussian);
        Self {
            data: None,
            data_family: Family::Gaussian,
            shifts: None,
            model_family: None,
            basis: model.basis,
            backbone: model.backbone,
            head_hidden: model.head_hidden,
            ratio_bound: model.ratio_bound,
            fluctuation: model.fluctuation,
            train: TrainConfig::default(),
            estimators: vec![EstimatorKind::Plugin, EstimatorKind::Aipw, EstimatorKind::Tr],
            bases: Vec::new(),
            model_families: Vec::new(),
            seeds: 1,
            out_dir: PathBuf::from("out"),
            model_path: None,
            ensemble_size: 30,
            ensemble_vary_seed: true,
            percent_change: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        // Generator pieces are collected first and assembled at the end.
        let mut dgp: Option<DgpKind> = None;
        let mut n: Option<usize> = None;
        let mut noise: Option<f64> = None;
        let mut data_seed: u64 = 0;
        let mut data_path: Option<PathBuf> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!(
                    "line {}: key `{key}` given twice",
                    lineno + 1
                )));
            }
            let t = &mut cfg.train;
            match key {
                "dgp" => dgp = Some(parse(key, value)?),
                "n" => n = Some(parse(key, value)?),
                "noise" => noise = Some(parse(key, value)?),
                "data_seed" => data_seed = parse(key, value)?,
                "data_path" => data_path = Some(PathBuf::from(value)),
                "data_family" => cfg.data_family = parse(key, value)?,
                "shifts" => cfg.shifts = Some(parse(key, value)?),
                "model_family" => cfg.model_family = Some(parse(key, value)?),
                "basis" => cfg.basis = parse(key, value)?,
                "backbone" => cfg.backbone = parse_list(key, value)?,
                "head_hidden" => cfg.head_hidden = parse_list(key, value)?,
                "ratio_bound" => cfg.ratio_bound = parse(key, value)?,
                "fluctuation" => cfg.fluctuation = parse(key, value)?,
                "learning_rate" => t.learning_rate = parse(key, value)?,
                "beta1" => t.betas.0 = parse(key, value)?,
                "beta2" => t.betas.1 = parse(key, value)?,
                "epochs" => t.epochs = parse(key, value)?,
                "batch_size" => {
                    t.batch_size = match value {
                        "auto" => None,
                        v => Some(parse(key, v)?),
                    }
                }
                "alpha" => t.alpha = parse(key, value)?,
                "beta0" => t.beta0 = parse(key, value)?,
                "detach_ratio_in_tr" => t.detach_ratio_in_tr = parse_bool(key, value)?,
                "seed" => t.seed = parse(key, value)?,
                "estimators" => cfg.estimators = parse_list(key, value)?,
                "bases" => cfg.bases = parse_list(key, value)?,
                "model_families" => cfg.model_families = parse_list(key, value)?,
                "seeds" => cfg.seeds = parse(key, value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "model_path" => cfg.model_path = Some(PathBuf::from(value)),
                "ensemble_size" => cfg.ensemble_size = parse(key, value)?,
                "ensemble_vary_seed" => cfg.ensemble_vary_seed = parse_bool(key, value)?,
                "percent_change" => cfg.percent_change = parse_bool(key, value)?,
                other => return Err(CliError::Config(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }

        cfg.data = match (dgp, data_path) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("give either `dgp` or `data_path`, not both".into()));
            }
            (Some(kind), None) => Some(DataSource::Generator {
                kind,
                n: n.ok_or_else(|| CliError::Config("`dgp` needs a sample size `n`".into()))?,
                noise,
                seed: data_seed,
            }),
            (None, Some(path)) => {
                if n.is_some() || noise.is_some() {
                    return Err(CliError::Config("`n` and `noise` only apply to generated data".into()));
                }
                Some(DataSource::Csv(path))
            }
            (None, None) => None,
        };
        cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.estimators.is_empty() {
            return Err(CliError::Config("`estimators` must name at least one estimator".into()));
        }
        Ok(cfg)
    }

    pub fn model_family(&self) -> Family {
        self.model_family.unwrap_or(self.data_family)
    }

    pub fn shifts(&self) -> Result<&ShiftFamily, CliError> {
        self.shifts
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `shifts`".into()))
    }

    /// Generator settings for a given data seed, if the data is simulated.
    pub fn dgp_spec(&self, seed: u64) -> Option<DgpSpec> {
        match &self.data {
            Some(DataSource::Generator { kind, n, noise, .. }) => {
                let mut spec = DgpSpec::new(*kind, self.data_family, *n, seed);
                if let Some(s) = noise {
                    spec.noise = *s;
                }
                Some(spec)
            }
            _ => None,
        }
    }

    pub fn model_config(&self, input_dim: usize, family: Family, basis: BasisKind) -> ModelConfig {
        ModelConfig {
            input_dim,
            family,
            basis,
            backbone: self.backbone.clone(),
            head_hidden: self.head_hidden.clone(),
            ratio_bound: self.ratio_bound,
            fluctuation: self.fluctuation,
        }
    }
}

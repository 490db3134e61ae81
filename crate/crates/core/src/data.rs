//! Datasets: synthetic generators with known counterfactual means, CSV
//! persistence, train/test splits, bootstrap resampling and the MISE metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::autodiff::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::estimators::OutcomeModel;
use crate::family::Family;
use crate::shifts::{oracle_log_ratio_percent, ShiftFamily, ShiftSpec};

const PAIRWISE_PREFIX: &str = "a_tilde_";
const COUNTERFACTUAL_PREFIX: &str = "mu_tilde_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgpKind {
    /// `X ~ N(0,1)`, `A = X + N(0,1)`, mean `A X` (Gaussian) or
    /// `exp(2 tanh(A X / 2))` (Poisson).
    Linear,
    /// Six uniform covariates with confounded exposure on `(0.1, 0.9)`.
    Nonlinear,
}

impl DgpKind {
    pub fn name(self) -> &'static str {
        match self {
            DgpKind::Linear => "linear",
            DgpKind::Nonlinear => "nonlinear",
        }
    }
}

impl FromStr for DgpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(DgpKind::Linear),
            "nonlinear" => Ok(DgpKind::Nonlinear),
            other => Err(Error::InvalidParameter(format!("unknown generator `{other}`"))),
        }
    }
}

/// Ground truth attached to generated data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Oracle {
    pub kind: DgpKind,
    pub family: Family,
}

fn nonlinear_score(x: &[f64]) -> f64 {
    x[0] + 2.0 * x[1] - x[2] - 0.5 * x[3] - 0.75
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn normal_log_density(v: f64, mean: f64, sd: f64) -> f64 {
    let z = (v - mean) / sd;
    -0.5 * z * z - sd.ln() - LOG_SQRT_2PI
}

impl Oracle {
    /// True natural parameter at one covariate row.
    pub fn eta_at(&self, x: &[f64], a: f64) -> f64 {
        match (self.kind, self.family) {
            (DgpKind::Linear, Family::Poisson) => 2.0 * (0.5 * a * x[0]).tanh(),
            (DgpKind::Linear, _) => a * x[0],
            (DgpKind::Nonlinear, _) => {
                0.2 + (x[0] + x[1] + x[4]) / 3.0
                    + 4.0 * a * (1.0 - a)
                    + (2.0 * std::f64::consts::PI * a).sin() * (x[2] - 0.5)
                    + a * x[3]
            }
        }
    }

    pub fn mean_at(&self, x: &[f64], a: f64) -> f64 {
        self.family.mean_from_natural(self.eta_at(x, a))
    }

    /// Conditional log density of the exposure, `log p(a | x)`.
    pub fn exposure_log_density(&self, x: &[f64], a: f64) -> f64 {
        match self.kind {
            DgpKind::Linear => normal_log_density(a, x[0], 1.0),
            DgpKind::Nonlinear => {
                let s = (a - 0.1) / 0.8;
                if !(s > 0.0 && s < 1.0) {
                    return f64::NEG_INFINITY;
                }
                let u = (s / (1.0 - s)).ln();
                // change of variables a -> logit((a - 0.1) / 0.8)
                normal_log_density(u, nonlinear_score(x), 0.5) - (0.8 * s * (1.0 - s)).ln()
            }
        }
    }

    /// True log density ratio of a percent shift, `log p~(a|x) - log p(a|x)`.
    /// Returns `-inf` where the shifted density vanishes.
    pub fn log_ratio_percent(&self, c: f64, x: &[f64], a: f64) -> Result<f64> {
        match self.kind {
            DgpKind::Linear => oracle_log_ratio_percent(c, x[0], 1.0, a),
            DgpKind::Nonlinear => {
                if !(0.0..1.0).contains(&c) {
                    return Err(Error::InvalidParameter(format!(
                        "percent reduction {c} must lie in [0, 1)"
                    )));
                }
                let k = 1.0 - c;
                let num = self.exposure_log_density(x, a / k);
                if num == f64::NEG_INFINITY {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(num - k.ln() - self.exposure_log_density(x, a))
            }
        }
    }
}

impl OutcomeModel for Oracle {
    fn family(&self) -> Family {
        self.family
    }

    fn eta(&self, x: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
        if x.rows() != a.len() {
            return Err(Error::shape(
                "oracle",
                format!("{} rows, {} exposures", x.rows(), a.len()),
            ));
        }
        let d = x.cols();
        Ok(a.iter()
            .enumerate()
            .map(|(i, &ai)| self.eta_at(&x.values()[i * d..(i + 1) * d], ai))
            .collect())
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub family: Family,
    /// Gaussian noise sd; ignored for Poisson outcomes.
    pub noise: f64,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, family: Family, n: usize, seed: u64) -> Self {
        let noise = match kind {
            DgpKind::Linear => 1.0,
            DgpKind::Nonlinear => 0.5,
        };
        Self {
            kind,
            family,
            noise,
            n,
            seed,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("sample size must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise scale {} must be >= 0",
                self.noise
            )));
        }
        if self.family == Family::Bernoulli {
            return Err(Error::InvalidParameter(
                "generators support gaussian and poisson outcomes".into(),
            ));
        }
        let oracle = Oracle {
            kind: self.kind,
            family: self.family,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = match self.kind {
            DgpKind::Linear => 1,
            DgpKind::Nonlinear => 6,
        };
        let mut x = Vec::with_capacity(self.n * d);
        let mut a = Vec::with_capacity(self.n);
        let mut y = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let row_start = x.len();
            let ai = match self.kind {
                DgpKind::Linear => {
                    let xi: f64 = rng.sample(StandardNormal);
                    x.push(xi);
                    xi + rng.sample::<f64, _>(StandardNormal)
                }
                DgpKind::Nonlinear => {
                    for _ in 0..d {
                        x.push(rng.random::<f64>());
                    }
                    let zeta: f64 = rng.sample(StandardNormal);
                    0.1 + 0.8 * sigmoid(nonlinear_score(&x[row_start..]) + 0.5 * zeta)
                }
            };
            let mean = oracle.mean_at(&x[row_start..], ai);
            let yi = match self.family {
                Family::Poisson => Poisson::new(mean)
                    .map_err(|e| Error::InvalidParameter(format!("poisson rate {mean}: {e}")))?
                    .sample(&mut rng),
                _ => mean + self.noise * rng.sample::<f64, _>(StandardNormal),
            };
            a.push(ai);
            y.push(yi);
        }
        let mut ds = Dataset::new(Tensor::new(self.n, d, x)?, a, y, self.family)?;
        ds.oracle = Some(oracle);
        ds.source = format!(
            "generator={} family={} noise={} n={} seed={}",
            self.kind.name(),
            self.family,
            self.noise,
            self.n,
            self.seed
        );
        Ok(ds)
    }
}

pub fn gen_linear(n: usize, seed: u64, noise_sd: f64) -> Result<Dataset> {
    DgpSpec {
        noise: noise_sd,
        ..DgpSpec::new(DgpKind::Linear, Family::Gaussian, n, seed)
    }
    .generate()
}

pub fn gen_nonlinear(n: usize, seed: u64, family: Family) -> Result<Dataset> {
    DgpSpec::new(DgpKind::Nonlinear, family, n, seed).generate()
}

/// Observed `(X, A, Y)` with optional oracle and extra columns.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `n x d` covariates.
    pub x: Tensor,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub family: Family,
    pub oracle: Option<Oracle>,
    /// Precomputed shifted exposures keyed by pairwise shift name.
    pub pairwise: BTreeMap<String, Vec<f64>>,
    /// Known counterfactual means keyed by pairwise shift name.
    pub counterfactual: BTreeMap<String, Vec<f64>>,
    /// Free-form description of where the data came from.
    pub source: String,
}

impl Dataset {
    pub fn new(x: Tensor, a: Vec<f64>, y: Vec<f64>, family: Family) -> Result<Self> {
        let ds = Self {
            x,
            a,
            y,
            family,
            oracle: None,
            pairwise: BTreeMap::new(),
            counterfactual: BTreeMap::new(),
            source: String::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 {
            return Err(Error::InvalidParameter("dataset is empty".into()));
        }
        if self.x.rows() != n || self.y.len() != n {
            return Err(Error::IndexMismatch(format!(
                "covariates have {} rows, exposures {n}, outcomes {}",
                self.x.rows(),
                self.y.len()
            )));
        }
        for (name, col) in self.pairwise.iter().chain(&self.counterfactual) {
            if col.len() != n {
                return Err(Error::IndexMismatch(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        if !self.x.all_finite() || self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "covariates and exposures must be finite".into(),
            ));
        }
        self.family.check_outcomes(&self.y)?;
        if self.family == Family::Poisson {
            if let Some(i) = self.y.iter().position(|v| v.fract() != 0.0) {
                return Err(Error::OutcomeDomain {
                    family: "poisson",
                    row: i,
                    value: self.y[i],
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.x.values()[i * d..(i + 1) * d]
    }

    /// Shifted exposures for `spec`, resolving pairwise columns.
    pub fn shifted(&self, spec: &ShiftSpec) -> Result<Vec<f64>> {
        match spec {
            ShiftSpec::Pairwise(name) => {
                let col = self
                    .pairwise
                    .get(name)
                    .ok_or_else(|| Error::MissingPairwiseColumn(name.clone()))?;
                spec.apply(&self.a, Some(col))
            }
            _ => spec.apply(&self.a, None),
        }
    }

    /// Rows at `indices` (repeats allowed), keeping oracle and extra columns.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::IndexMismatch(format!(
                "row {bad} out of range for {} rows",
                self.n()
            )));
        }
        let d = self.d();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(self.x_row(i));
        }
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let cols = |m: &BTreeMap<String, Vec<f64>>| m.iter().map(|(k, v)| (k.clone(), pick(v))).collect();
        let out = Self {
            x: Tensor::new(indices.len(), d, x)?,
            a: pick(&self.a),
            y: pick(&self.y),
            family: self.family,
            oracle: self.oracle,
            pairwise: cols(&self.pairwise),
            counterfactual: cols(&self.counterfactual),
            source: self.source.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn y_sd(&self) -> f64 {
        sample_sd(&self.y)
    }

    pub fn metadata_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family={}", self.family);
        let _ = writeln!(s, "n={}", self.n());
        let _ = writeln!(s, "d={}", self.d());
        let _ = writeln!(s, "source={}", self.source);
        if let Some(o) = &self.oracle {
            let _ = writeln!(s, "oracle={}", o.kind.name());
        }
        let names: Vec<&str> = self.pairwise.keys().map(String::as_str).collect();
        let _ = writeln!(s, "pairwise={}", names.join(","));
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(ctx(), e))?;
        let mut header: Vec<String> = (1..=self.d()).map(|j| format!("x_{j}")).collect();
        header.push("a".into());
        header.push("y".into());
        header.extend(self.pairwise.keys().map(|k| format!("{PAIRWISE_PREFIX}{k}")));
        header.extend(
            self.counterfactual
                .keys()
                .map(|k| format!("{COUNTERFACTUAL_PREFIX}{k}")),
        );
        w.write_record(&header).map_err(|e| csv_io(ctx(), e))?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            rec.clear();
            rec.extend(self.x_row(i).iter().map(f64::to_string));
            rec.push(self.a[i].to_string());
            rec.push(self.y[i].to_string());
            rec.extend(self.pairwise.values().map(|c| c[i].to_string()));
            rec.extend(self.counterfactual.values().map(|c| c[i].to_string()));
            w.write_record(&rec).map_err(|e| csv_io(ctx(), e))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    /// Reads `x_1..x_d, a, y` plus optional `a_tilde_<name>` and
    /// `mu_tilde_<name>` columns. Other columns are ignored.
    pub fn load_csv(path: &Path, family: Family) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
        let csv_err = |line: usize, detail: String| Error::Csv {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let header = r.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let missing = |column: &str| Error::MissingColumn {
            path: path.to_path_buf(),
            column: column.to_string(),
        };
        let mut xcols = Vec::new();
        while let Some(p) = find(&format!("x_{}", xcols.len() + 1)) {
            xcols.push(p);
        }
        if xcols.is_empty() {
            return Err(missing("x_1"));
        }
        let acol = find("a").ok_or_else(|| missing("a"))?;
        let ycol = find("y").ok_or_else(|| missing("y"))?;
        let extra = |prefix: &str| -> Vec<(String, usize)> {
            header
                .iter()
                .enumerate()
                .filter_map(|(i, h)| h.trim().strip_prefix(prefix).map(|n| (n.to_string(), i)))
                .collect()
        };
        let pw_cols = extra(PAIRWISE_PREFIX);
        let cf_cols = extra(COUNTERFACTUAL_PREFIX);

        let mut x = Vec::new();
        let (mut a, mut y) = (Vec::new(), Vec::new());
        let mut pw: Vec<Vec<f64>> = vec![Vec::new(); pw_cols.len()];
        let mut cf: Vec<Vec<f64>> = vec![Vec::new(); cf_cols.len()];
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                csv_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != header.len() {
                return Err(csv_err(
                    line,
                    format!("expected {} fields, found {}", header.len(), rec.len()),
                ));
            }
            let cell = |i: usize| -> Result<f64> {
                let raw = rec[i].trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_err(line, format!("column `{}`: `{raw}` is not a finite number", &header[i])))
            };
            for &c in &xcols {
                x.push(cell(c)?);
            }
            a.push(cell(acol)?);
            let yi = cell(ycol)?;
            family
                .check_outcome(y.len(), yi)
                .map_err(|e| csv_err(line, e.to_string()))?;
            y.push(yi);
            for (k, (_, c)) in pw_cols.iter().enumerate() {
                pw[k].push(cell(*c)?);
            }
            for (k, (_, c)) in cf_cols.iter().enumerate() {
                cf[k].push(cell(*c)?);
            }
        }
        if a.is_empty() {
            return Err(csv_err(2, "no data rows".into()));
        }
        let n = a.len();
        let mut ds = Dataset::new(Tensor::new(n, xcols.len(), x)?, a, y, family)?;
        ds.pairwise = pw_cols.into_iter().map(|(k, _)| k).zip(pw).collect();
        ds.counterfactual = cf_cols.into_iter().map(|(k, _)| k).zip(cf).collect();
        ds.source = format!("csv={}", path.display());
        Ok(ds)
    }
}

fn csv_io(context: String, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(context, io),
        other => Error::io(context, std::io::Error::other(format!("{other:?}"))),
    }
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Per-shift ground truth: the sample mean of the true mean function at the
/// shifted exposures. Pairwise shifts may instead use a `mu_tilde_<name>` column.
pub fn oracle_srf(ds: &Dataset, shifts: &ShiftFamily) -> Result<Vec<f64>> {
    shifts
        .iter()
        .map(|spec| {
            if let (ShiftSpec::Pairwise(name), None) = (spec, &ds.oracle) {
                if let Some(col) = ds.counterfactual.get(name) {
                    return Ok(col.iter().sum::<f64>() / col.len() as f64);
                }
            }
            let oracle = ds
                .oracle
                .as_ref()
                .ok_or_else(|| Error::MissingOracle(format!("shift {spec}")))?;
            let shifted = ds.shifted(spec)?;
            let mean = oracle.mean(&ds.x, &shifted)?;
            Ok(mean.iter().sum::<f64>() / mean.len() as f64)
        })
        .collect()
}

/// True density ratios at the observed exposures, one vector per shift.
/// Only percent shifts have a closed form.
pub fn oracle_weights(ds: &Dataset, shifts: &ShiftFamily) -> Result<Vec<Vec<f64>>> {
    let oracle = ds
        .oracle
        .as_ref()
        .ok_or_else(|| Error::MissingOracle("density ratios".into()))?;
    shifts
        .iter()
        .map(|spec| match spec {
            ShiftSpec::Percent(c) => (0..ds.n())
                .map(|i| Ok(oracle.log_ratio_percent(*c, ds.x_row(i), ds.a[i])?.exp()))
                .collect(),
            other => Err(Error::InvalidParameter(format!(
                "no closed-form density ratio for shift {other}"
            ))),
        })
        .collect()
}

/// Mean over seeds and shifts of the squared estimation error.
pub fn mise(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::IndexMismatch(format!(
            "{} estimate rows vs {} truth rows",
            estimates.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, (e, t)) in estimates.iter().zip(truths).enumerate() {
        if e.len() != t.len() || e.is_empty() {
            return Err(Error::IndexMismatch(format!(
                "seed {s}: {} estimates vs {} truths",
                e.len(),
                t.len()
            )));
        }
        total += e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += e.len();
    }
    Ok(total / count as f64)
}

/// Seeded partition into `(train, test)` row indices, each sorted ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidParameter(format!(
            "splitting {n} rows at fraction {test_fraction} leaves one side empty"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.n(), test_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// `n` row indices drawn with replacement.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

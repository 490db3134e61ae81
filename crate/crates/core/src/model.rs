//! Varying-coefficient network with a shared covariate backbone, an outcome
//! head, one log-density-ratio head per shift, and per-shift fluctuations.
//!
//! A varying-coefficient (VC) layer has weights that are linear combinations
//! of basis functions of the normalized exposure `t`:
//! `W(t) = sum_b coeff_b * phi_b(t)`, and likewise for the bias.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::shifts::ShiftFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    /// Truncated-power quadratic spline, knots at 1/3 and 2/3.
    Spline,
    /// Hinge basis with the same knots.
    PiecewiseLinear,
}

const KNOTS: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

impl BasisKind {
    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Spline => "spline",
            BasisKind::PiecewiseLinear => "piecewise-linear",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            BasisKind::Spline => 5,
            BasisKind::PiecewiseLinear => 4,
        }
    }

    pub fn eval(self, t: f64) -> Vec<f64> {
        let h1 = (t - KNOTS[0]).max(0.0);
        let h2 = (t - KNOTS[1]).max(0.0);
        match self {
            BasisKind::Spline => vec![1.0, t, t * t, h1 * h1, h2 * h2],
            BasisKind::PiecewiseLinear => vec![1.0, t, h1, h2],
        }
    }
}

impl FromStr for BasisKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spline" => Ok(BasisKind::Spline),
            "piecewise-linear" | "pwl" | "linear" => Ok(BasisKind::PiecewiseLinear),
            other => Err(Error::InvalidParameter(format!("unknown basis `{other}`"))),
        }
    }
}

/// How the fluctuation parameter enters the outcome model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fluctuation {
    /// Offset `eta + eps_j`, with the density ratio as a per-sample loss weight.
    Weighted,
    /// Clever covariate `eta + eps_j * w_j(x, a)`, unweighted loss.
    Clever,
}

impl Fluctuation {
    pub fn name(self) -> &'static str {
        match self {
            Fluctuation::Weighted => "weighted",
            Fluctuation::Clever => "clever",
        }
    }
}

impl FromStr for Fluctuation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "weighted" => Ok(Fluctuation::Weighted),
            "clever" => Ok(Fluctuation::Clever),
            other => Err(Error::InvalidParameter(format!("unknown fluctuation `{other}`"))),
        }
    }
}

/// Affine map of exposures onto `[0, 1]`, fitted on training exposures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExposureScaler {
    pub min: f64,
    pub max: f64,
}

impl ExposureScaler {
    pub fn fit(a: &[f64]) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidParameter("cannot fit exposure range on no data".into()));
        }
        let (min, max) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::InvalidParameter("exposures must be finite".into()));
        }
        Ok(Self { min, max })
    }

    /// Normalized exposure and whether it had to be clamped.
    pub fn normalize(&self, a: f64) -> (f64, bool) {
        let range = self.max - self.min;
        if range <= 0.0 {
            return (0.0, a != self.min);
        }
        let t = (a - self.min) / range;
        (t.clamp(0.0, 1.0), !(0.0..=1.0).contains(&t))
    }
}

/// Basis functions evaluated at a batch of exposures.
#[derive(Clone, Debug)]
pub struct BasisEval {
    /// `n x basis_dim`.
    pub full: Tensor,
    /// Column `b` of `full` as an `n x 1` tensor.
    pub cols: Vec<Tensor>,
    /// Exposures that fell outside the fitted range.
    pub clamped: usize,
}

impl BasisEval {
    pub fn new(kind: BasisKind, scaler: &ExposureScaler, a: &[f64]) -> Self {
        let b = kind.dim();
        let mut full = Vec::with_capacity(a.len() * b);
        let mut cols = vec![Vec::with_capacity(a.len()); b];
        let mut clamped = 0;
        for &v in a {
            let (t, c) = scaler.normalize(v);
            clamped += usize::from(c);
            let phi = kind.eval(t);
            for (k, p) in phi.iter().enumerate() {
                cols[k].push(*p);
            }
            full.extend(phi);
        }
        Self {
            full: Tensor::new(a.len(), b, full).expect("basis shape"),
            cols: cols.into_iter().map(Tensor::column).collect(),
            clamped,
        }
    }

    pub fn rows(&self) -> usize {
        self.full.rows()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let v = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(rows, cols, v).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Self {
            weight: uniform(rng, input, output, input),
            bias: uniform(rng, 1, output, input),
        }
    }

    fn forward(&self, tape: &mut Tape, h: &Tensor) -> Result<Tensor> {
        let z = tape.matmul(h, &self.weight)?;
        let z = tape.add(&z, &self.bias)?;
        tape.relu(&z)
    }
}

#[derive(Clone, Debug)]
pub struct VcLayer {
    /// One `in_dim x out_dim` coefficient matrix per basis function.
    pub coeff: Vec<Tensor>,
    /// `basis_dim x out_dim`.
    pub bias: Tensor,
    pub relu: bool,
}

impl VcLayer {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize, basis_dim: usize, relu: bool) -> Self {
        let fan_in = input * basis_dim;
        Self {
            coeff: (0..basis_dim).map(|_| uniform(rng, input, output, fan_in)).collect(),
            bias: uniform(rng, basis_dim, output, fan_in),
            relu,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.coeff[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.coeff[0].cols()
    }

    /// `coeff[i, o, b]` in (input, output, basis) indexing.
    pub fn coefficient(&self, i: usize, o: usize, b: usize) -> f64 {
        self.coeff[b].get(i, o)
    }

    /// Effective `in_dim x out_dim` weight at basis values `phi`.
    pub fn effective_weight(&self, phi: &[f64]) -> Tensor {
        let mut w = Tensor::zeros(self.in_dim(), self.out_dim());
        let acc = w.values_mut();
        for (c, p) in self.coeff.iter().zip(phi) {
            acc.iter_mut().zip(c.values()).for_each(|(a, v)| *a += p * v);
        }
        w
    }

    /// `relu?( sum_b phi_b(t) * (H C_b) + Φ(t) bias )`.
    pub fn forward(&self, tape: &mut Tape, h: &Tensor, basis: &BasisEval) -> Result<Tensor> {
        if h.cols() != self.in_dim() || basis.cols.len() != self.coeff.len() {
            return Err(Error::shape(
                "vc-layer",
                format!(
                    "input {}x{} with {} basis columns, layer expects {} inputs and {} basis functions",
                    h.rows(),
                    h.cols(),
                    basis.cols.len(),
                    self.in_dim(),
                    self.coeff.len()
                ),
            ));
        }
        let mut acc = tape.matmul(&basis.full, &self.bias)?;
        for (c, phi) in self.coeff.iter().zip(&basis.cols) {
            let proj = tape.matmul(h, c)?;
            let term = tape.mul(&proj, phi)?;
            acc = tape.add(&acc, &term)?;
        }
        if self.relu {
            tape.relu(&acc)
        } else {
            Ok(acc)
        }
    }
}

/// Stack of VC layers ending in a single output.
#[derive(Clone, Debug)]
pub struct Head {
    pub layers: Vec<VcLayer>,
}

impl Head {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], basis_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            layers.push(VcLayer::init(rng, width, h, basis_dim, true));
            width = h;
        }
        layers.push(VcLayer::init(rng, width, 1, basis_dim, false));
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, z: &Tensor, basis: &BasisEval) -> Result<Tensor> {
        let mut h = z.clone();
        for layer in &self.layers {
            h = layer.forward(tape, &h, basis)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub family: Family,
    pub basis: BasisKind,
    /// Widths of the dense ReLU backbone layers.
    pub backbone: Vec<usize>,
    /// Widths of the hidden VC layers in every head.
    pub head_hidden: Vec<usize>,
    /// Bound M on the density ratio; log-ratios are clamped to `±ln M`.
    pub ratio_bound: f64,
    pub fluctuation: Fluctuation,
}

impl ModelConfig {
    pub fn new(input_dim: usize, family: Family) -> Self {
        Self {
            input_dim,
            family,
            basis: BasisKind::Spline,
            backbone: vec![32, 32],
            head_hidden: vec![32],
            ratio_bound: 50.0,
            fluctuation: Fluctuation::Weighted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParameter("model needs at least one covariate".into()));
        }
        if self.backbone.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        if !(self.ratio_bound > 1.0 && self.ratio_bound.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "density-ratio bound {} must be finite and > 1",
                self.ratio_bound
            )));
        }
        Ok(())
    }
}

/// The network: backbone, outcome head, per-shift ratio heads and fluctuations.
#[derive(Clone, Debug)]
pub struct SrfNet {
    pub config: ModelConfig,
    shifts: ShiftFamily,
    scaler: Option<ExposureScaler>,
    pub backbone: Vec<Dense>,
    pub outcome: Head,
    pub ratio: Vec<Head>,
    /// `1 x num_shifts`.
    pub epsilon: Tensor,
    epsilon_fitted: bool,
}

impl SrfNet {
    pub fn new(config: ModelConfig, shifts: ShiftFamily, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = config.input_dim;
        let mut backbone = Vec::with_capacity(config.backbone.len());
        for &w in &config.backbone {
            backbone.push(Dense::init(&mut rng, width, w));
            width = w;
        }
        let b = config.basis.dim();
        let outcome = Head::init(&mut rng, width, &config.head_hidden, b);
        let ratio = (0..shifts.len())
            .map(|_| Head::init(&mut rng, width, &config.head_hidden, b))
            .collect();
        let epsilon = Tensor::zeros(1, shifts.len());
        Ok(Self {
            config,
            shifts,
            scaler: None,
            backbone,
            outcome,
            ratio,
            epsilon,
            epsilon_fitted: false,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn shifts(&self) -> &ShiftFamily {
        &self.shifts
    }

    pub fn num_shifts(&self) -> usize {
        self.shifts.len()
    }

    pub fn fit_exposure(&mut self, a: &[f64]) -> Result<()> {
        self.scaler = Some(ExposureScaler::fit(a)?);
        Ok(())
    }

    pub fn set_scaler(&mut self, scaler: ExposureScaler) {
        self.scaler = Some(scaler);
    }

    pub fn scaler(&self) -> Result<&ExposureScaler> {
        self.scaler
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("exposure normalization has not been fitted".into()))
    }

    pub fn normalize_exposure(&self, a: f64) -> Result<f64> {
        Ok(self.scaler()?.normalize(a).0)
    }

    pub fn basis(&self, a: &[f64]) -> Result<BasisEval> {
        Ok(BasisEval::new(self.config.basis, self.scaler()?, a))
    }

    pub fn epsilon_values(&self) -> &[f64] {
        self.epsilon.values()
    }

    pub fn epsilon_fitted(&self) -> bool {
        self.epsilon_fitted
    }

    /// Overwrites ε and marks it as solved.
    pub fn set_fitted_epsilon(&mut self, eps: &[f64]) -> Result<()> {
        if eps.len() != self.num_shifts() {
            return Err(Error::IndexMismatch(format!(
                "{} fluctuation values for {} shifts",
                eps.len(),
                self.num_shifts()
            )));
        }
        self.epsilon = Tensor::row(eps.to_vec());
        self.epsilon_fitted = true;
        Ok(())
    }

    /// Flags ε as out of date (any change to the network invalidates it).
    pub fn mark_epsilon_stale(&mut self) {
        self.epsilon_fitted = false;
    }

    /// Backbone features `Z`.
    pub fn features(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "backbone",
                format!(
                    "covariates have {} columns, model expects {}",
                    x.cols(),
                    self.config.input_dim
                ),
            ));
        }
        let mut h = x.clone();
        for layer in &self.backbone {
            h = layer.forward(tape, &h)?;
        }
        Ok(h)
    }

    /// Natural parameter η, `n x 1`.
    pub fn eta(&self, tape: &mut Tape, z: &Tensor, basis: &BasisEval) -> Result<Tensor> {
        self.outcome.forward(tape, z, basis)
    }

    /// Clamped log density ratio for shift `j`, `n x 1`.
    pub fn log_ratio(&self, tape: &mut Tape, z: &Tensor, basis: &BasisEval, j: usize) -> Result<Tensor> {
        let head = self
            .ratio
            .get(j)
            .ok_or_else(|| Error::IndexMismatch(format!("shift {j} of {}", self.ratio.len())))?;
        let raw = head.forward(tape, z, basis)?;
        tape.clamp_symmetric(&raw, self.config.ratio_bound.ln())
    }

    /// Natural parameter at `(x, a)` without recording.
    pub fn predict_eta(&self, x: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
        check_rows(x, a)?;
        let mut tape = Tape::inference();
        let z = self.features(&mut tape, x)?;
        let basis = self.basis(a)?;
        Ok(self.eta(&mut tape, &z, &basis)?.values().to_vec())
    }

    pub fn predict_mean(&self, x: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
        let fam = self.family();
        Ok(self
            .predict_eta(x, a)?
            .into_iter()
            .map(|e| fam.mean_from_natural(e))
            .collect())
    }

    /// Clamped log-ratios of every shift at `(x, a)`, `n x num_shifts`.
    pub fn predict_log_ratios(&self, x: &Tensor, a: &[f64]) -> Result<Tensor> {
        check_rows(x, a)?;
        let mut tape = Tape::inference();
        let z = self.features(&mut tape, x)?;
        let basis = self.basis(a)?;
        let cols = (0..self.num_shifts())
            .map(|j| self.log_ratio(&mut tape, &z, &basis, j))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = cols.iter().collect();
        tape.column_concat(&refs)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.len() {
            names.push(format!("backbone.{i}.weight"));
            names.push(format!("backbone.{i}.bias"));
        }
        let mut head = |prefix: String, h: &Head| {
            for (i, l) in h.layers.iter().enumerate() {
                for b in 0..l.coeff.len() {
                    names.push(format!("{prefix}.{i}.coeff.{b}"));
                }
                names.push(format!("{prefix}.{i}.bias"));
            }
        };
        head("outcome".into(), &self.outcome);
        for (j, h) in self.ratio.iter().enumerate() {
            head(format!("ratio.{j}"), h);
        }
        names.push("epsilon".into());
        names
    }

    /// Every trainable tensor exactly once, in a fixed order matching
    /// [`SrfNet::parameter_names`].
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for d in &self.backbone {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        for h in std::iter::once(&self.outcome).chain(&self.ratio) {
            for l in &h.layers {
                out.extend(&l.coeff);
                out.push(&l.bias);
            }
        }
        out.push(&self.epsilon);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.backbone {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for h in std::iter::once(&mut self.outcome).chain(self.ratio.iter_mut()) {
            for l in &mut h.layers {
                out.extend(l.coeff.iter_mut());
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.epsilon);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// A copy whose parameters are leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Self {
        let mut bound = self.clone();
        for p in bound.parameters_mut() {
            *p = tape.leaf(p);
        }
        bound
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().iter().all(|t| t.all_finite())
    }

    pub fn to_text(&self) -> Result<String> {
        let scaler = self.scaler()?;
        let join = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::from("srfnet 1\n");
        let c = &self.config;
        let _ = writeln!(s, "input_dim={}", c.input_dim);
        let _ = writeln!(s, "family={}", c.family);
        let _ = writeln!(s, "basis={}", c.basis.name());
        let _ = writeln!(s, "backbone={}", join(&c.backbone));
        let _ = writeln!(s, "head_hidden={}", join(&c.head_hidden));
        let _ = writeln!(s, "ratio_bound={:e}", c.ratio_bound);
        let _ = writeln!(s, "fluctuation={}", c.fluctuation.name());
        let _ = writeln!(s, "shifts={}", self.shifts);
        let _ = writeln!(s, "exposure_min={:e}", scaler.min);
        let _ = writeln!(s, "exposure_max={:e}", scaler.max);
        let _ = writeln!(s, "epsilon_fitted={}", self.epsilon_fitted);
        for (name, t) in self.parameter_names().iter().zip(self.parameters()) {
            let _ = writeln!(s, "tensor {name} {} {}", t.rows(), t.cols());
            let vals: Vec<String> = t.values().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("srfnet 1") {
            return Err(bad("missing `srfnet 1` header".into()));
        }
        let mut header = std::collections::BTreeMap::new();
        let mut rest = Vec::new();
        for line in lines.by_ref() {
            if line.starts_with("tensor ") {
                rest.push(line);
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
        rest.extend(lines);
        let get = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| bad(format!("missing header key `{k}`")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad number for `{k}`"))) };
        let widths = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|w| w.trim().parse().map_err(|_| bad(format!("bad width in `{k}`"))))
                .collect()
        };
        let config = ModelConfig {
            input_dim: get("input_dim")?.parse().map_err(|_| bad("bad input_dim".into()))?,
            family: get("family")?.parse()?,
            basis: get("basis")?.parse()?,
            backbone: widths("backbone")?,
            head_hidden: widths("head_hidden")?,
            ratio_bound: num("ratio_bound")?,
            fluctuation: get("fluctuation")?.parse()?,
        };
        let shifts: ShiftFamily = get("shifts")?.parse()?;
        let mut model = SrfNet::new(config, shifts, 0)?;
        model.scaler = Some(ExposureScaler {
            min: num("exposure_min")?,
            max: num("exposure_max")?,
        });
        let fitted = get("epsilon_fitted")? == "true";

        let names = model.parameter_names();
        let mut it = rest.into_iter();
        for (name, p) in names.iter().zip(model.parameters_mut()) {
            let head = it.next().ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let expected = [name.as_str(), &p.rows().to_string(), &p.cols().to_string()];
            if parts.len() != 4 || parts[0] != "tensor" || parts[1..] != expected {
                return Err(bad(format!(
                    "expected tensor `{name}` {}x{}, found `{head}`",
                    p.rows(),
                    p.cols()
                )));
            }
            let body = it.next().ok_or_else(|| bad(format!("missing values for `{name}`")))?;
            let vals = body
                .split_whitespace()
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad(format!("non-numeric or non-finite value in `{name}`")))?;
            if vals.len() != p.len() {
                return Err(bad(format!("`{name}` has {} values, expected {}", vals.len(), p.len())));
            }
            *p = Tensor::new(p.rows(), p.cols(), vals)?;
        }
        if it.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content after last tensor".into()));
        }
        model.epsilon_fitted = fitted;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing model {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading model {}", path.display()), e))?;
        Self::from_text(&text)
    }
}

fn check_rows(x: &Tensor, a: &[f64]) -> Result<()> {
    if x.rows() != a.len() {
        return Err(Error::shape(
            "forward",
            format!("{} covariate rows but {} exposures", x.rows(), a.len()),
        ));
    }
    Ok(())
}

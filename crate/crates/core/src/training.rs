//! Empirical risks, the joint objective, Adam training and the fluctuation refit.
//!
//! The objective is `outcome + alpha * ratio + beta_n * tr` with
//! `beta_n = beta0 / sqrt(n)`:
//!
//! * outcome: mean of `Λ(η) - Yη`;
//! * ratio: binary cross-entropy with logit `log ŵ_j`, shifted exposures as
//!   positives and observed exposures as negatives, averaged over shifts;
//! * tr: the fluctuated outcome loss. In the weighted form each shift adds
//!   `ŵ_j(X, A) [Λ(η + ε_j) - (η + ε_j) Y]`; in the clever-covariate form the
//!   natural parameter becomes `η + ε_j ŵ_j(X, A)` and the loss is unweighted.
//!
//! After the last epoch ε is re-solved exactly by bisection so that the
//! weighted residual `(1/n) Σ ŵ_j (Y - µ̃_j)` vanishes.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{sample_sd, Dataset};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::model::{BasisEval, Fluctuation, ModelConfig, SrfNet};
use crate::shifts::{screen_positivity, ShiftFamily};

/// Half-width of the bracket searched for each fluctuation parameter.
pub const EPSILON_BRACKET: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    /// `None` picks full batch for `n <= 5000` and 256 otherwise.
    pub batch_size: Option<usize>,
    pub alpha: f64,
    pub beta0: f64,
    /// Stops the targeted loss from updating the ratio heads.
    pub detach_ratio_in_tr: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            epochs: 1000,
            batch_size: None,
            alpha: 1.0,
            beta0: 1.0,
            detach_ratio_in_tr: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("moment decays ({b1}, {b2}) must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        if !(self.beta0 >= 0.0 && self.beta0.is_finite()) {
            return bad(format!("beta0 {} must be >= 0", self.beta0));
        }
        Ok(())
    }

    /// Weight of the targeted loss for a training set of size `n`.
    pub fn beta_n(&self, n: usize) -> f64 {
        self.beta0 / (n.max(1) as f64).sqrt()
    }

    pub fn resolved_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= 5000 => n,
            None => 256,
        }
    }
}

/// One mini-batch with exposures expanded into basis values.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    /// `m x 1`.
    pub y: Tensor,
    pub observed: BasisEval,
    /// One basis evaluation per shift at the shifted exposures.
    pub shifted: Vec<BasisEval>,
}

impl Batch {
    /// Batch over `rows` (or all rows) using precomputed shifted exposures.
    pub fn new(model: &SrfNet, ds: &Dataset, shifted: &[Vec<f64>], rows: Option<&[usize]>) -> Result<Self> {
        if shifted.len() != model.num_shifts() {
            return Err(Error::IndexMismatch(format!(
                "{} shifted exposure columns for {} shifts",
                shifted.len(),
                model.num_shifts()
            )));
        }
        let scaler = *model.scaler()?;
        let kind = model.config.basis;
        let take = |v: &[f64]| -> Vec<f64> {
            match rows {
                Some(r) => r.iter().map(|&i| v[i]).collect(),
                None => v.to_vec(),
            }
        };
        let x = match rows {
            Some(r) => {
                let mut t = Tape::inference();
                t.row_gather(&ds.x, r.to_vec())?
            }
            None => ds.x.clone(),
        };
        Ok(Self {
            x,
            y: Tensor::column(take(&ds.y)),
            observed: BasisEval::new(kind, &scaler, &take(&ds.a)),
            shifted: shifted
                .iter()
                .map(|s| BasisEval::new(kind, &scaler, &take(s)))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared forward quantities for one batch.
struct Pass {
    eta: Tensor,
    log_w_obs: Vec<Tensor>,
    log_w_shift: Vec<Tensor>,
}

fn forward_pass(tape: &mut Tape, model: &SrfNet, batch: &Batch, with_ratio: bool) -> Result<Pass> {
    let z = model.features(tape, &batch.x)?;
    let eta = model.eta(tape, &z, &batch.observed)?;
    let mut log_w_obs = Vec::new();
    let mut log_w_shift = Vec::new();
    if with_ratio {
        for j in 0..model.num_shifts() {
            log_w_obs.push(model.log_ratio(tape, &z, &batch.observed, j)?);
            log_w_shift.push(model.log_ratio(tape, &z, &batch.shifted[j], j)?);
        }
    }
    Ok(Pass {
        eta,
        log_w_obs,
        log_w_shift,
    })
}

fn outcome_from(tape: &mut Tape, family: Family, pass: &Pass, batch: &Batch) -> Result<Tensor> {
    let nll = family.nll_on(tape, &pass.eta, &batch.y)?;
    tape.mean(&nll)
}

fn ratio_from(tape: &mut Tape, pass: &Pass) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (obs, shift) in pass.log_w_obs.iter().zip(&pass.log_w_shift) {
        let neg = tape.neg(shift)?;
        let pos_loss = tape.softplus(&neg)?;
        let neg_loss = tape.softplus(obs)?;
        let pos = tape.mean(&pos_loss)?;
        let negm = tape.mean(&neg_loss)?;
        let term = tape.add(&pos, &negm)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidParameter("no shifts to classify".into()))?;
    tape.scale(&total, 0.5 / pass.log_w_obs.len() as f64)
}

fn tr_from(tape: &mut Tape, model: &SrfNet, pass: &Pass, batch: &Batch, detach: bool) -> Result<Tensor> {
    let refs: Vec<&Tensor> = pass.log_w_obs.iter().collect();
    let log_w = tape.column_concat(&refs)?;
    let w = tape.exp(&log_w)?;
    let w = if detach { w.detach() } else { w };
    let family = model.family();
    match model.config.fluctuation {
        Fluctuation::Weighted => {
            let fluct = tape.add(&pass.eta, &model.epsilon)?;
            let nll = family.nll_on(tape, &fluct, &batch.y)?;
            let weighted = tape.mul(&nll, &w)?;
            tape.mean(&weighted)
        }
        Fluctuation::Clever => {
            let offset = tape.mul(&w, &model.epsilon)?;
            let fluct = tape.add(&pass.eta, &offset)?;
            let nll = family.nll_on(tape, &fluct, &batch.y)?;
            tape.mean(&nll)
        }
    }
}

/// Mean negative log-likelihood of the outcome head.
pub fn outcome_risk(tape: &mut Tape, model: &SrfNet, batch: &Batch) -> Result<Tensor> {
    let pass = forward_pass(tape, model, batch, false)?;
    outcome_from(tape, model.family(), &pass, batch)
}

/// Classification risk of the density-ratio heads.
pub fn ratio_risk(tape: &mut Tape, model: &SrfNet, batch: &Batch) -> Result<Tensor> {
    let pass = forward_pass(tape, model, batch, true)?;
    ratio_from(tape, &pass)
}

/// Targeted loss averaged over samples and shifts.
pub fn tr_risk(tape: &mut Tape, model: &SrfNet, batch: &Batch, detach_ratio: bool) -> Result<Tensor> {
    let pass = forward_pass(tape, model, batch, true)?;
    tr_from(tape, model, &pass, batch, detach_ratio)
}

/// The three risks and their weighted sum, sharing one forward pass.
#[derive(Clone, Debug)]
pub struct Risks {
    pub outcome: Tensor,
    pub ratio: Tensor,
    pub tr: Tensor,
    pub total: Tensor,
}

/// `outcome + alpha * ratio + beta_n * tr`, where `n` is the training-set size.
pub fn total_objective(tape: &mut Tape, model: &SrfNet, batch: &Batch, cfg: &TrainConfig, n: usize) -> Result<Risks> {
    let pass = forward_pass(tape, model, batch, true)?;
    let outcome = outcome_from(tape, model.family(), &pass, batch)?;
    let ratio = ratio_from(tape, &pass)?;
    let tr = tr_from(tape, model, &pass, batch, cfg.detach_ratio_in_tr)?;
    let a = tape.scale(&ratio, cfg.alpha)?;
    let b = tape.scale(&tr, cfg.beta_n(n))?;
    let total = tape.add(&outcome, &a)?;
    let total = tape.add(&total, &b)?;
    Ok(Risks {
        outcome,
        ratio,
        tr,
        total,
    })
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), shapes: &[usize]) -> Self {
        Self {
            lr,
            b1: betas.0,
            b2: betas.1,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.b1 * m[i] + (1.0 - self.b1) * g[i];
                v[i] = self.b2 * v[i] + (1.0 - self.b2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Epoch-averaged risk components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub outcome: f64,
    pub ratio: f64,
    pub tr: f64,
    pub total: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,outcome_risk,ratio_risk,tr_risk,total\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.outcome, r.ratio, r.tr, r.total);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: SrfNet,
    pub history: Vec<EpochRecord>,
}

/// Shifted exposures for every shift, with positivity screening.
pub fn shifted_exposures(ds: &Dataset, shifts: &ShiftFamily) -> Result<Vec<Vec<f64>>> {
    shifts
        .iter()
        .map(|s| {
            let v = ds.shifted(s)?;
            screen_positivity(&s.to_string(), &ds.a, &v);
            Ok(v)
        })
        .collect()
}

/// Trains from a fresh initialization seeded by `cfg.seed`, then refits ε.
pub fn train(ds: &Dataset, shifts: &ShiftFamily, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    ds.validate()?;
    model_cfg.family.check_outcomes(&ds.y)?;
    let mut model = SrfNet::new(model_cfg.clone(), shifts.clone(), cfg.seed)?;
    model.fit_exposure(&ds.a)?;
    let history = fit(&mut model, ds, cfg)?;
    refit_epsilon(&mut model, ds)?;
    Ok(TrainOutput { model, history })
}

/// Runs the optimizer on an initialized model. Leaves ε marked stale.
pub fn fit(model: &mut SrfNet, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    model.family().check_outcomes(&ds.y)?;
    model.mark_epsilon_stale();
    let n = ds.n();
    let shifted = shifted_exposures(ds, model.shifts())?;
    let batch_size = cfg.resolved_batch(n);
    let full = if batch_size >= n {
        Some(Batch::new(model, ds, &shifted, None)?)
    } else {
        None
    };
    let shapes: Vec<usize> = model.parameters().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.betas, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let batches: Vec<Option<&[usize]>> = if full.is_some() {
            vec![None]
        } else {
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(Some).collect()
        };
        for rows in batches {
            let owned;
            let batch = match (&full, rows) {
                (Some(b), _) => b,
                (None, Some(r)) => {
                    owned = Batch::new(model, ds, &shifted, Some(r))?;
                    &owned
                }
                (None, None) => unreachable!(),
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let risks = total_objective(&mut tape, &bound, batch, cfg, n)?;
            let values = [
                risks.outcome.item(),
                risks.ratio.item(),
                risks.tr.item(),
                risks.total.item(),
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!(
                        "non-finite loss (outcome {}, ratio {}, tr {}, total {})",
                        values[0], values[1], values[2], values[3]
                    ),
                });
            }
            let grads = tape.backward(&risks.total)?;
            let gvals = bound
                .parameters()
                .into_iter()
                .map(|p| grads.wrt(p).map(|g| g.values().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            if gvals.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            let grefs: Vec<&[f64]> = gvals.iter().map(Vec::as_slice).collect();
            adam.step(model.parameters_mut(), &grefs);
            let m = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * m;
            }
        }
        let rec = EpochRecord {
            epoch,
            outcome: sums[0] / n as f64,
            ratio: sums[1] / n as f64,
            tr: sums[2] / n as f64,
            total: sums[3] / n as f64,
        };
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            log::debug!(
                "epoch {epoch}: outcome {:.6} ratio {:.6} tr {:.6} total {:.6}",
                rec.outcome,
                rec.ratio,
                rec.tr,
                rec.total
            );
        }
        history.push(rec);
    }
    if !model.all_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            detail: "non-finite parameters after training".into(),
        });
    }
    model.mark_epsilon_stale();
    Ok(history)
}

/// `(1/n) Σ w_i (y_i - g⁻¹(η_i + ε c_i))` where `c_i` is 1 for the weighted
/// fluctuation and `w_i` for the clever covariate.
pub fn fluctuation_residual(
    family: Family,
    fluctuation: Fluctuation,
    y: &[f64],
    eta: &[f64],
    w: &[f64],
    eps: f64,
) -> f64 {
    let n = y.len() as f64;
    let sum: f64 = y
        .iter()
        .zip(eta)
        .zip(w)
        .map(|((&yi, &ei), &wi)| {
            let offset = match fluctuation {
                Fluctuation::Weighted => eps,
                Fluctuation::Clever => eps * wi,
            };
            wi * (yi - family.mean_from_natural(ei + offset))
        })
        .sum();
    sum / n
}

/// Solves the fluctuation estimating equation for one shift by bisection on
/// `[-30, 30]`. The residual is nonincreasing in ε because weights are
/// nonnegative and the inverse link is increasing.
pub fn solve_fluctuation(
    family: Family,
    fluctuation: Fluctuation,
    y: &[f64],
    eta: &[f64],
    w: &[f64],
    shift: usize,
) -> Result<f64> {
    if y.len() != eta.len() || y.len() != w.len() || y.is_empty() {
        return Err(Error::IndexMismatch(format!(
            "{} outcomes, {} predictions, {} weights",
            y.len(),
            eta.len(),
            w.len()
        )));
    }
    let r = |e: f64| fluctuation_residual(family, fluctuation, y, eta, w, e);
    let scale = sample_sd(y).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    if r(0.0).abs() <= tol {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (-EPSILON_BRACKET, EPSILON_BRACKET);
    let (f_lo, f_hi) = (r(lo), r(hi));
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::NoSignChange {
            shift,
            lo,
            hi,
            f_lo,
            f_hi,
        });
    }
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = r(mid);
        if f.abs() < best.0 {
            best = (f.abs(), mid);
        }
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// Re-solves every ε_j on `ds` and marks the fluctuation as fitted.
pub fn refit_epsilon(model: &mut SrfNet, ds: &Dataset) -> Result<Vec<f64>> {
    let eta = model.predict_eta(&ds.x, &ds.a)?;
    let log_w = model.predict_log_ratios(&ds.x, &ds.a)?;
    let eps = (0..model.num_shifts())
        .map(|j| {
            let w: Vec<f64> = log_w.column_values(j).into_iter().map(f64::exp).collect();
            solve_fluctuation(model.family(), model.config.fluctuation, &ds.y, &eta, &w, j)
        })
        .collect::<Result<Vec<_>>>()?;
    model.set_fitted_epsilon(&eps)?;
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.beta_n(100) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.resolved_batch(5000), 5000);
        assert_eq!(cfg.resolved_batch(5001), 256);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: Some(0),
                ..TrainConfig::default()
            },
            TrainConfig {
                beta0: -1.0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn gaussian_unit_weight_solution_is_mean_gap() {
        let y = [1.0, 2.5, -0.5, 4.0];
        let eta = [0.2, 0.1, 0.3, -0.4];
        let w = [1.0; 4];
        let eps = solve_fluctuation(Family::Gaussian, Fluctuation::Weighted, &y, &eta, &w, 0).unwrap();
        let expect = y.iter().sum::<f64>() / 4.0 - eta.iter().sum::<f64>() / 4.0;
        assert!((eps - expect).abs() < 1e-11, "{eps} vs {expect}");
    }

    #[test]
    fn poisson_solution_is_log_ratio_of_sums() {
        let y = [0.0, 3.0, 1.0, 7.0, 2.0];
        let eta = [0.1f64, 0.5, -0.3, 1.2, 0.0];
        let w = [0.5, 1.5, 2.0, 0.7, 1.0];
        let eps = solve_fluctuation(Family::Poisson, Fluctuation::Weighted, &y, &eta, &w, 0).unwrap();
        let num: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
        let den: f64 = eta.iter().zip(&w).map(|(e, b)| e.exp() * b).sum();
        assert!((eps - (num / den).ln()).abs() < 1e-10);
    }

    #[test]
    fn no_sign_change_is_reported() {
        let err = solve_fluctuation(
            Family::Poisson,
            Fluctuation::Weighted,
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
            3,
        );
        assert!(matches!(err, Err(Error::NoSignChange { shift: 3, .. })));
    }
}

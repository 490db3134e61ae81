//! Shift-response estimators and their diagnostics.
//!
//! All estimators read precomputed nuisance values ([`Nuisances`]): the
//! natural parameter at observed and shifted exposures, the density ratio at
//! observed exposures, and the fluctuation ε. Nuisances can come from a
//! trained [`SrfNet`] or be injected directly, which is how oracle and
//! deliberately wrong nuisances are tested.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::{bootstrap_indices, Dataset};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::model::{Fluctuation, ModelConfig, SrfNet};
use crate::shifts::{ShiftFamily, ShiftSpec};
use crate::training::{solve_fluctuation, train, TrainConfig};

/// Anything that predicts the natural parameter at `(x, a)`.
pub trait OutcomeModel {
    fn family(&self) -> Family;

    fn eta(&self, x: &Tensor, a: &[f64]) -> Result<Vec<f64>>;

    fn mean(&self, x: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
        let f = self.family();
        Ok(self.eta(x, a)?.into_iter().map(|e| f.mean_from_natural(e)).collect())
    }
}

impl OutcomeModel for SrfNet {
    fn family(&self) -> Family {
        self.config.family
    }

    fn eta(&self, x: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
        self.predict_eta(x, a)
    }
}

/// A model that predicts the same mean everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantModel {
    pub family: Family,
    pub mean: f64,
}

impl OutcomeModel for ConstantModel {
    fn family(&self) -> Family {
        self.family
    }

    fn eta(&self, _x: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.family.natural_from_mean(self.mean)?; a.len()])
    }
}

/// Nuisance values for every unit and shift.
#[derive(Clone, Debug)]
pub struct Nuisances {
    pub family: Family,
    pub fluctuation: Fluctuation,
    pub shifts: ShiftFamily,
    pub y: Vec<f64>,
    /// η̂(X_i, A_i).
    pub eta_obs: Vec<f64>,
    /// η̂(X_i, Ã_ij), one vector per shift.
    pub eta_shift: Vec<Vec<f64>>,
    /// ŵ_j(X_i, A_i), one vector per shift.
    pub w_obs: Vec<Vec<f64>>,
    /// ŵ_j(X_i, Ã_ij); only needed by the clever-covariate fluctuation.
    pub w_shift: Vec<Vec<f64>>,
    pub epsilon: Vec<f64>,
    pub epsilon_fitted: bool,
}

impl Nuisances {
    /// Nuisances of a trained network on `ds`, using the network's shifts and ε.
    pub fn from_model(model: &SrfNet, ds: &Dataset) -> Result<Self> {
        let shifts = model.shifts().clone();
        let mut nu = Self::from_outcome(model, ds, &shifts)?;
        nu.fluctuation = model.config.fluctuation;
        let log_w = model.predict_log_ratios(&ds.x, &ds.a)?;
        nu.w_obs = (0..shifts.len())
            .map(|j| log_w.column_values(j).into_iter().map(f64::exp).collect())
            .collect();
        if nu.fluctuation == Fluctuation::Clever {
            nu.w_shift = shifts
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let lw = model.predict_log_ratios(&ds.x, &ds.shifted(s)?)?;
                    Ok(lw.column_values(j).into_iter().map(f64::exp).collect())
                })
                .collect::<Result<_>>()?;
        }
        nu.epsilon = model.epsilon_values().to_vec();
        nu.epsilon_fitted = model.epsilon_fitted();
        Ok(nu)
    }

    /// Outcome nuisances from any model, with unit weights and stale ε = 0.
    pub fn from_outcome(model: &dyn OutcomeModel, ds: &Dataset, shifts: &ShiftFamily) -> Result<Self> {
        let eta_obs = model.eta(&ds.x, &ds.a)?;
        let eta_shift = shifts
            .iter()
            .map(|s| model.eta(&ds.x, &ds.shifted(s)?))
            .collect::<Result<Vec<_>>>()?;
        let n = ds.n();
        Ok(Self {
            family: model.family(),
            fluctuation: Fluctuation::Weighted,
            shifts: shifts.clone(),
            y: ds.y.clone(),
            eta_obs,
            eta_shift,
            w_obs: vec![vec![1.0; n]; shifts.len()],
            w_shift: Vec::new(),
            epsilon: vec![0.0; shifts.len()],
            epsilon_fitted: false,
        })
    }

    /// Replaces the observed-exposure weights (one vector per shift).
    pub fn with_weights(mut self, w_obs: Vec<Vec<f64>>) -> Result<Self> {
        if w_obs.len() != self.num_shifts() || w_obs.iter().any(|w| w.len() != self.n()) {
            return Err(Error::IndexMismatch("weight columns do not match nuisances".into()));
        }
        self.w_obs = w_obs;
        self.epsilon_fitted = false;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_shifts(&self) -> usize {
        self.eta_shift.len()
    }

    /// Solves ε_j for every shift on these nuisances.
    pub fn refit(&mut self) -> Result<()> {
        let mut eps = Vec::with_capacity(self.num_shifts());
        for j in 0..self.num_shifts() {
            eps.push(solve_fluctuation(
                self.family,
                self.fluctuation,
                &self.y,
                &self.eta_obs,
                &self.w_obs[j],
                j,
            )?);
        }
        self.epsilon = eps;
        self.epsilon_fitted = true;
        Ok(())
    }

    fn mu(&self, eta: f64) -> f64 {
        self.family.mean_from_natural(eta)
    }

    fn check_clever(&self) -> Result<()> {
        if self.fluctuation == Fluctuation::Clever && self.w_shift.len() != self.num_shifts() {
            return Err(Error::IndexMismatch(
                "clever fluctuation needs weights at shifted exposures".into(),
            ));
        }
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// `(1/n) Σ g⁻¹(η̂(X_i, Ã_ij))` per shift.
pub fn plugin_srf(nu: &Nuisances) -> Vec<f64> {
    nu.eta_shift
        .iter()
        .map(|e| mean(e.iter().map(|&v| nu.mu(v)), nu.n()))
        .collect()
}

/// `(1/n) Σ ŵ_j(X_i, A_i) (Y_i - µ̂(X_i, A_i))` per shift.
pub fn debiasing_term(nu: &Nuisances) -> Vec<f64> {
    nu.w_obs
        .iter()
        .map(|w| {
            mean(
                w.iter()
                    .zip(&nu.y)
                    .zip(&nu.eta_obs)
                    .map(|((&wi, &yi), &ei)| wi * (yi - nu.mu(ei))),
                nu.n(),
            )
        })
        .collect()
}

/// Plugin plus debiasing term.
pub fn aipw_srf(nu: &Nuisances) -> Vec<f64> {
    plugin_srf(nu)
        .into_iter()
        .zip(debiasing_term(nu))
        .map(|(p, d)| p + d)
        .collect()
}

/// Plugin of the fluctuated model at shifted exposures. Requires a solved ε.
pub fn tr_srf(nu: &Nuisances) -> Result<Vec<f64>> {
    if !nu.epsilon_fitted {
        return Err(Error::StaleEpsilon);
    }
    nu.check_clever()?;
    Ok((0..nu.num_shifts())
        .map(|j| {
            let eps = nu.epsilon[j];
            let it = nu.eta_shift[j].iter().enumerate().map(|(i, &e)| {
                let offset = match nu.fluctuation {
                    Fluctuation::Weighted => eps,
                    Fluctuation::Clever => eps * nu.w_shift[j][i],
                };
                nu.mu(e + offset)
            });
            mean(it, nu.n())
        })
        .collect())
}

/// Weighted residual `(1/n) Σ ŵ_ij (Y_i - µ̃_j(X_i, A_i))` at the current ε.
pub fn eee_residual(nu: &Nuisances, j: usize) -> Result<f64> {
    if j >= nu.num_shifts() {
        return Err(Error::IndexMismatch(format!("shift {j} of {}", nu.num_shifts())));
    }
    Ok(crate::training::fluctuation_residual(
        nu.family,
        nu.fluctuation,
        &nu.y,
        &nu.eta_obs,
        &nu.w_obs[j],
        nu.epsilon[j],
    ))
}

/// Per-unit influence values and the implied variance of the mean.
#[derive(Clone, Debug)]
pub struct Eif {
    /// `phi[j][i]`.
    pub phi: Vec<Vec<f64>>,
    /// Sample variance of `phi[j]` divided by `n`.
    pub variance: Vec<f64>,
}

/// `φ_ij = ŵ_j(Y_i - µ̂_i) + µ̂(X_i, Ã_ij) - ψ_j`.
pub fn eif(nu: &Nuisances, psi: &[f64]) -> Result<Eif> {
    if psi.len() != nu.num_shifts() {
        return Err(Error::IndexMismatch(format!(
            "{} estimates for {} shifts",
            psi.len(),
            nu.num_shifts()
        )));
    }
    let n = nu.n();
    let mut phi = Vec::with_capacity(psi.len());
    let mut variance = Vec::with_capacity(psi.len());
    for (j, &p) in psi.iter().enumerate() {
        let col: Vec<f64> = (0..n)
            .map(|i| nu.w_obs[j][i] * (nu.y[i] - nu.mu(nu.eta_obs[i])) + nu.mu(nu.eta_shift[j][i]) - p)
            .collect();
        let sd = crate::data::sample_sd(&col);
        variance.push(sd * sd / n as f64);
        phi.push(col);
    }
    Ok(Eif { phi, variance })
}

/// Exposure-response curve `ξ̂(a) = (1/n) Σ g⁻¹(η̂(X_i, a))`.
pub fn erf_plugin(model: &dyn OutcomeModel, x: &Tensor, grid: &[f64]) -> Result<Vec<f64>> {
    let n = x.rows();
    grid.iter()
        .map(|&a| Ok(mean(model.mean(x, &vec![a; n])?.into_iter(), n)))
        .collect()
}

/// Estimates for one shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftEstimate {
    pub spec: ShiftSpec,
    pub plugin: f64,
    pub aipw: f64,
    pub tr: f64,
    pub eee_residual: f64,
    pub eif_se: f64,
    /// Ensemble q25, q50, q75 of the targeted estimate.
    pub quantiles: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrfEstimate {
    pub rows: Vec<ShiftEstimate>,
}

impl SrfEstimate {
    pub fn from_nuisances(nu: &Nuisances) -> Result<Self> {
        let plugin = plugin_srf(nu);
        let aipw = aipw_srf(nu);
        let tr = tr_srf(nu)?;
        let inf = eif(nu, &tr)?;
        let rows = nu
            .shifts
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                Ok(ShiftEstimate {
                    spec: spec.clone(),
                    plugin: plugin[j],
                    aipw: aipw[j],
                    tr: tr[j],
                    eee_residual: eee_residual(nu, j)?,
                    eif_se: inf.variance[j].sqrt(),
                    quantiles: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn from_model(model: &SrfNet, ds: &Dataset) -> Result<Self> {
        Self::from_nuisances(&Nuisances::from_model(model, ds)?)
    }

    pub fn tr(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.tr).collect()
    }

    pub fn plugin(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.plugin).collect()
    }

    pub fn aipw(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.aipw).collect()
    }

    /// Curve table; adds `percent_change` relative to the identity shift when
    /// requested and an identity shift is present.
    pub fn to_csv(&self, percent_change: bool) -> String {
        let identity = self.rows.iter().find(|r| r.spec.is_identity()).map(|r| r.tr);
        let with_pct = percent_change && identity.is_some();
        let mut s = String::from("shift_kind,shift_param,psi_plugin,psi_aipw,psi_tr,eee_residual,eif_se,q25,q50,q75");
        if with_pct {
            s.push_str(",percent_change");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{}",
                r.spec.kind_name(),
                r.spec.param_label(),
                r.plugin,
                r.aipw,
                r.tr,
                r.eee_residual,
                r.eif_se
            );
            match r.quantiles {
                Some([a, b, c]) => {
                    let _ = write!(s, ",{a},{b},{c}");
                }
                None => s.push_str(",,,"),
            }
            if let (true, Some(base)) = (with_pct, identity) {
                let _ = write!(s, ",{}", 100.0 * (r.tr - base) / base);
            }
            s.push('\n');
        }
        s
    }
}

/// Quantile with linear interpolation between order statistics (type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub members: usize,
    pub jobs: usize,
    /// When false every member uses the base seed (same resample, same init).
    pub vary_seed: bool,
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    /// Targeted estimates per member, `None` for members that failed.
    pub members: Vec<Option<Vec<f64>>>,
    /// `[q25, q50, q75]` per shift over surviving members.
    pub quantiles: Vec<[f64; 3]>,
}

impl EnsembleResult {
    pub fn survivors(&self) -> usize {
        self.members.iter().filter(|m| m.is_some()).count()
    }
}

pub(crate) fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// Trains one member per bootstrap resample and summarizes the targeted
/// estimates (computed on each member's own resample) by quartiles.
pub fn bootstrap_ensemble(
    ds: &Dataset,
    shifts: &ShiftFamily,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ens: &EnsembleConfig,
) -> Result<EnsembleResult> {
    if ens.members < 2 {
        return Err(Error::InvalidParameter(format!(
            "ensemble needs at least 2 members, got {}",
            ens.members
        )));
    }
    let pool = worker_pool(ens.jobs)?;
    let results: Vec<Result<Vec<f64>>> = pool.install(|| {
        (0..ens.members)
            .into_par_iter()
            .map(|k| {
                let seed = if ens.vary_seed {
                    train_cfg.seed.wrapping_add(k as u64)
                } else {
                    train_cfg.seed
                };
                let sample = ds.subset(&bootstrap_indices(ds.n(), seed))?;
                let cfg = TrainConfig {
                    seed,
                    ..train_cfg.clone()
                };
                let out = train(&sample, shifts, model_cfg, &cfg)?;
                Ok(SrfEstimate::from_model(&out.model, &sample)?.tr())
            })
            .collect()
    });
    let mut members = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => members.push(Some(v)),
            Err(e) if e.is_numeric() => {
                log::warn!("ensemble member {k} failed: {e}");
                members.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let alive: Vec<&Vec<f64>> = members.iter().flatten().collect();
    if alive.len() * 2 < ens.members {
        return Err(Error::Ensemble {
            failed: ens.members - alive.len(),
            total: ens.members,
        });
    }
    let quantiles = (0..shifts.len())
        .map(|j| {
            let mut col: Vec<f64> = alive.iter().map(|m| m[j]).collect();
            col.sort_by(f64::total_cmp);
            [quantile(&col, 0.25), quantile(&col, 0.5), quantile(&col, 0.75)]
        })
        .collect();
    Ok(EnsembleResult { members, quantiles })
}

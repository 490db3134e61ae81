//! Estimator properties with oracle and deliberately wrong nuisances.

use srf_core::autodiff::Tensor;
use srf_core::data::{gen_linear, gen_nonlinear, oracle_srf, oracle_weights, Dataset};
use srf_core::estimators::{aipw_srf, eif, erf_plugin, plugin_srf, tr_srf, ConstantModel, Nuisances, OutcomeModel};
use srf_core::family::Family;
use srf_core::shifts::ShiftFamily;

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Standard error of the mean of `v`.
fn mc_se(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
}

fn unit_weights(ds: &Dataset, shifts: &ShiftFamily) -> Vec<Vec<f64>> {
    vec![vec![1.0; ds.n()]; shifts.len()]
}

/// AIPW error against the empirical truth under the three nuisance arms:
/// (true outcome, unit weights), (constant outcome, true weights), (constant, unit).
fn arms(ds: &Dataset, shifts: &ShiftFamily) -> [f64; 3] {
    let truth = oracle_srf(ds, shifts).unwrap()[0];
    let oracle = ds.oracle.unwrap();
    let y_bar = ds.y.iter().sum::<f64>() / ds.n() as f64;
    let wrong = ConstantModel {
        family: ds.family,
        mean: y_bar,
    };
    let w_true = oracle_weights(ds, shifts).unwrap();
    let a1 = Nuisances::from_outcome(&oracle, ds, shifts)
        .unwrap()
        .with_weights(unit_weights(ds, shifts))
        .unwrap();
    let a2 = Nuisances::from_outcome(&wrong, ds, shifts)
        .unwrap()
        .with_weights(w_true)
        .unwrap();
    let a3 = Nuisances::from_outcome(&wrong, ds, shifts)
        .unwrap()
        .with_weights(unit_weights(ds, shifts))
        .unwrap();
    [a1, a2, a3].map(|nu| aipw_srf(&nu)[0] - truth)
}

#[test]
fn three_arm_harness_on_confounded_dgp() {
    let shifts: ShiftFamily = "percent:0.2".parse().unwrap();
    let mut errs = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..20 {
        let ds = gen_nonlinear(2000, 500 + seed, Family::Gaussian).unwrap();
        for (k, e) in arms(&ds, &shifts).into_iter().enumerate() {
            errs[k].push(e);
        }
    }
    let [mu_ok, w_ok, both] = errs.map(|e| (median(&e), mc_se(&e)));
    assert!(mu_ok.0.abs() < 2.0 * mu_ok.1, "oracle outcome arm: {mu_ok:?}");
    assert!(w_ok.0.abs() < 2.0 * w_ok.1, "oracle weight arm: {w_ok:?}");
    assert!(both.0.abs() > 5.0 * both.1, "both-wrong arm: {both:?}");
}

#[test]
fn oracle_nuisances_on_linear_dgp_are_unbiased() {
    // Arms 1 and 2 on the linear DGP with a halving shift.
    let shifts: ShiftFamily = "percent:0.5".parse().unwrap();
    let mut errs = [Vec::new(), Vec::new()];
    for seed in 0..20 {
        let ds = gen_linear(2000, 900 + seed, 1.0).unwrap();
        let [a, b, _] = arms(&ds, &shifts);
        errs[0].push(a);
        errs[1].push(b);
    }
    for e in &errs {
        assert!(median(e).abs() < 3.0 * mc_se(e), "{} vs {}", median(e), mc_se(e));
    }
}

#[test]
fn eif_interval_covers_closed_form_truth() {
    let shifts: ShiftFamily = "percent:0.5".parse().unwrap();
    let mut covered = 0;
    for seed in 0..100 {
        let ds = gen_linear(1000, 3000 + seed, 1.0).unwrap();
        let oracle = ds.oracle.unwrap();
        let w = oracle_weights(&ds, &shifts).unwrap();
        let nu = Nuisances::from_outcome(&oracle, &ds, &shifts)
            .unwrap()
            .with_weights(w)
            .unwrap();
        let psi = aipw_srf(&nu);
        let var = eif(&nu, &psi).unwrap().variance[0];
        if (psi[0] - 0.5).abs() <= 1.96 * var.sqrt() {
            covered += 1;
        }
    }
    assert!(covered >= 90, "covered {covered}/100");
}

#[test]
fn identity_shift_with_unit_weights_recovers_sample_mean() {
    let shifts: ShiftFamily = "percent:0,percent:0.3".parse().unwrap();
    for (ds, tol_scale) in [
        (gen_nonlinear(800, 1, Family::Gaussian).unwrap(), 1e-8),
        (gen_nonlinear(800, 2, Family::Poisson).unwrap(), 1e-8),
    ] {
        let model = ConstantModel {
            family: ds.family,
            mean: 1.3,
        };
        let mut nu = Nuisances::from_outcome(&model, &ds, &shifts)
            .unwrap()
            .with_weights(unit_weights(&ds, &shifts))
            .unwrap();
        nu.refit().unwrap();
        let psi = tr_srf(&nu).unwrap();
        let y_bar = ds.y.iter().sum::<f64>() / ds.n() as f64;
        assert!((psi[0] - y_bar).abs() < tol_scale * ds.y_sd(), "{} vs {y_bar}", psi[0]);
    }
}

/// Mean nondecreasing in the exposure.
struct Increasing;

impl OutcomeModel for Increasing {
    fn family(&self) -> Family {
        Family::Gaussian
    }

    fn eta(&self, x: &Tensor, a: &[f64]) -> srf_core::Result<Vec<f64>> {
        Ok(a.iter()
            .enumerate()
            .map(|(i, &ai)| ai.tanh() * (1.0 + x.get(i, 0).abs()))
            .collect())
    }
}

#[test]
fn plugin_is_monotone_in_the_cutoff() {
    let ds = gen_linear(1000, 6, 1.0).unwrap();
    let shifts: ShiftFamily = "grid:cutoff:-2:3:11".parse().unwrap();
    let psi = plugin_srf(&Nuisances::from_outcome(&Increasing, &ds, &shifts).unwrap());
    for pair in psi.windows(2) {
        assert!(pair[1] >= pair[0], "{pair:?}");
    }
}

#[test]
fn erf_of_constant_column_shift_matches_plugin() {
    let mut ds = gen_linear(300, 2, 1.0).unwrap();
    ds.pairwise.insert("flat".into(), vec![0.7; 300]);
    let shifts: ShiftFamily = "pairwise:flat".parse().unwrap();
    let plug = plugin_srf(&Nuisances::from_outcome(&Increasing, &ds, &shifts).unwrap())[0];
    let erf = erf_plugin(&Increasing, &ds.x, &[0.7]).unwrap()[0];
    assert_eq!(plug, erf);
    let constant = ConstantModel {
        family: Family::Gaussian,
        mean: 2.5,
    };
    assert!(erf_plugin(&constant, &ds.x, &[-1.0, 0.0, 4.0])
        .unwrap()
        .iter()
        .all(|v| *v == 2.5));
}

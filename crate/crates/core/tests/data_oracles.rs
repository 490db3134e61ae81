//! Generators against their closed-form truths, plus CSV persistence.

use std::fs;

use srf_core::data::{gen_linear, gen_nonlinear, oracle_srf, split_indices, Dataset};
use srf_core::estimators::{erf_plugin, plugin_srf, Nuisances, OutcomeModel};
use srf_core::family::Family;
use srf_core::shifts::{ShiftFamily, ShiftSpec};
use srf_core::Error;

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn linear_truth_matches_closed_form_at_large_n() {
    let ds = gen_linear(1_000_000, 17, 1.0).unwrap();
    let shifts: ShiftFamily = "percent:0.5,percent:0".parse().unwrap();
    let truth = oracle_srf(&ds, &shifts).unwrap();
    assert!((truth[0] - 0.5).abs() < 0.01, "{}", truth[0]);
    assert!((truth[1] - 1.0).abs() < 0.02, "{}", truth[1]);
}

#[test]
fn linear_oracle_plugin_and_erf_separate() {
    let ds = gen_linear(100_000, 4, 1.0).unwrap();
    let oracle = ds.oracle.unwrap();
    let shifts: ShiftFamily = "percent:0.5".parse().unwrap();
    let nu = Nuisances::from_outcome(&oracle, &ds, &shifts).unwrap();
    let psi = plugin_srf(&nu)[0];
    // Monte Carlo s.e. of mean(0.5 A X) is about 0.5 * sqrt(3 / n).
    let se = 0.5 * (3.0f64 / 100_000.0).sqrt();
    assert!((psi - 0.5).abs() < 3.0 * se, "{psi}");
    let grid: Vec<f64> = (0..9).map(|k| -2.0 + 0.5 * k as f64).collect();
    for (a, xi) in grid.iter().zip(erf_plugin(&oracle, &ds.x, &grid).unwrap()) {
        assert!(xi.abs() < 0.05, "erf({a}) = {xi}");
    }
}

#[test]
fn nonlinear_exposure_stays_inside_support_and_confounds() {
    let ds = gen_nonlinear(10_000, 8, Family::Gaussian).unwrap();
    assert!(ds.a.iter().all(|&a| a > 0.1 && a < 0.9));
    let x2: Vec<f64> = (0..ds.n()).map(|i| ds.x_row(i)[1]).collect();
    assert!(correlation(&ds.a, &x2) > 0.3);
}

#[test]
fn poisson_rates_stay_below_forty() {
    let ds = gen_nonlinear(1_000_000, 9, Family::Poisson).unwrap();
    let oracle = ds.oracle.unwrap();
    let rates = oracle.mean(&ds.x, &ds.a).unwrap();
    let max = rates.iter().copied().fold(f64::MIN, f64::max);
    let min = rates.iter().copied().fold(f64::MAX, f64::min);
    assert!(max < 40.0 && min > 1.0, "rates in [{min}, {max}]");
    assert!(ds.y.iter().all(|y| *y >= 0.0 && y.fract() == 0.0));
}

#[test]
fn constant_oracle_gives_flat_truth() {
    let mut ds = gen_linear(500, 1, 1.0).unwrap();
    // X = 0 makes the linear oracle a*x identically zero.
    ds.x = srf_core::autodiff::Tensor::zeros(ds.n(), 1);
    let shifts: ShiftFamily = "grid:percent:0:0.5:6".parse().unwrap();
    let truth = oracle_srf(&ds, &shifts).unwrap();
    assert!(truth.iter().all(|t| *t == truth[0]));
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = gen_linear(100, 5, 1.0).unwrap();
    ds.save_csv(&path).unwrap();
    let back = Dataset::load_csv(&path, Family::Gaussian).unwrap();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff(ds.x.values(), back.x.values()) < 1e-12);
    assert!(diff(&ds.a, &back.a) < 1e-12);
    assert!(diff(&ds.y, &back.y) < 1e-12);
}

#[test]
fn csv_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noy.csv");
    fs::write(&path, "x_1,a\n0.1,0.2\n").unwrap();
    match Dataset::load_csv(&path, Family::Gaussian) {
        Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "y"),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "x_1,a,y\n0.1,0.2,0.3\n0.1,abc,0.3\n").unwrap();
    match Dataset::load_csv(&path, Family::Gaussian) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "x_1,a,y\n0.1,0.2,0.3\n0.1,0.2\n").unwrap();
    assert!(matches!(
        Dataset::load_csv(&path, Family::Gaussian),
        Err(Error::Csv { line: 3, .. })
    ));
}

#[test]
fn pairwise_column_is_usable_as_a_shift() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let mut text = String::from("x_1,a,y,a_tilde_cut9\n");
    for i in 0..20 {
        let a = i as f64;
        text.push_str(&format!("{},{a},{},{}\n", i % 3, 2.0 * a, a.min(9.0)));
    }
    fs::write(&path, text).unwrap();
    let ds = Dataset::load_csv(&path, Family::Gaussian).unwrap();
    let spec: ShiftSpec = "pairwise:cut9".parse().unwrap();
    let shifted = ds.shifted(&spec).unwrap();
    assert_eq!(shifted[15], 9.0);
    assert_eq!(shifted, ds.shifted(&ShiftSpec::Cutoff(9.0)).unwrap());
    assert!(matches!(
        ds.shifted(&"pairwise:other".parse().unwrap()),
        Err(Error::MissingPairwiseColumn(_))
    ));
}

#[test]
fn split_partitions_rows() {
    let (train, test) = split_indices(10, 0.2, 3).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    assert_eq!(split_indices(10, 0.2, 3).unwrap(), (train.clone(), test.clone()));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
}

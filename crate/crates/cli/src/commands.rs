//! The five subcommands. Each returns the paths it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use srf_core::data::{mise, oracle_srf, Dataset};
use srf_core::estimators::{bootstrap_ensemble, quantile, EnsembleConfig, SrfEstimate};
use srf_core::family::Family;
use srf_core::model::{BasisKind, SrfNet};
use srf_core::shifts::ShiftFamily;
use srf_core::training::{history_csv, train, TrainConfig};

use crate::config::{DataSource, EstimatorKind, RunConfig};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.csv";
pub const METADATA_FILE: &str = "metadata.txt";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MODEL_FILE: &str = "model.srf";
pub const HISTORY_FILE: &str = "history.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const BENCHMARK_FILE: &str = "benchmark.csv";
pub const ENSEMBLE_FILE: &str = "ensemble.csv";

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Io { context, source }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a temporary file so a failed run never leaves a partial artifact.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = tmp_path(path);
    fs::write(&tmp, contents).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io_err(format!("renaming to {}", path.display())))
}

/// Dataset for the given generator seed (ignored for CSV sources).
pub fn load_dataset(cfg: &RunConfig, data_seed: u64) -> Result<Dataset, CliError> {
    match &cfg.data {
        Some(DataSource::Generator { .. }) => {
            let spec = cfg.dgp_spec(data_seed).expect("generator source");
            Ok(spec.generate()?)
        }
        Some(DataSource::Csv(path)) => Ok(Dataset::load_csv(path, cfg.data_family)?),
        None => Err(CliError::Config("no dataset: set `dgp` and `n`, or `data_path`".into())),
    }
}

fn base_data_seed(cfg: &RunConfig) -> u64 {
    match &cfg.data {
        Some(DataSource::Generator { seed, .. }) => *seed,
        _ => 0,
    }
}

fn truth_csv(shifts: &ShiftFamily, truth: &[f64]) -> String {
    let mut s = String::from("shift_kind,shift_param,psi_true\n");
    for (spec, t) in shifts.iter().zip(truth) {
        let _ = writeln!(s, "{},{},{t}", spec.kind_name(), spec.param_label());
    }
    s
}

/// Simulated dataset, its metadata, and the true shift-response curve.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    if !matches!(cfg.data, Some(DataSource::Generator { .. })) {
        return Err(CliError::Config("simulate needs a generator (`dgp` and `n`)".into()));
    }
    let shifts = cfg.shifts()?;
    let ds = load_dataset(cfg, base_data_seed(cfg))?;
    let truth = oracle_srf(&ds, shifts)?;

    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let data_path = dir.join(DATASET_FILE);
    let tmp = tmp_path(&data_path);
    ds.save_csv(&tmp)?;
    fs::rename(&tmp, &data_path).map_err(io_err(format!("renaming to {}", data_path.display())))?;
    let meta_path = dir.join(METADATA_FILE);
    write_atomic(&meta_path, &format!("{}shifts={shifts}\n", ds.metadata_text()))?;
    let truth_path = dir.join(TRUTH_FILE);
    write_atomic(&truth_path, &truth_csv(shifts, &truth))?;
    Ok(vec![data_path, meta_path, truth_path])
}

fn train_on(
    cfg: &RunConfig,
    ds: &Dataset,
    family: Family,
    basis: BasisKind,
    train_cfg: &TrainConfig,
) -> Result<srf_core::training::TrainOutput, CliError> {
    let model_cfg = cfg.model_config(ds.d(), family, basis);
    Ok(train(ds, cfg.shifts()?, &model_cfg, train_cfg)?)
}

/// Trains one model and writes it with its per-epoch loss history.
pub fn train_model(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(cfg, base_data_seed(cfg))?;
    let out = train_on(cfg, &ds, cfg.model_family(), cfg.basis, &cfg.train)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let model_path = dir.join(MODEL_FILE);
    write_atomic(&model_path, &out.model.to_text()?)?;
    let hist_path = dir.join(HISTORY_FILE);
    write_atomic(&hist_path, &history_csv(&out.history))?;
    Ok(vec![model_path, hist_path])
}

/// Shift-response curve of a saved model on the configured dataset.
pub fn estimate(cfg: &RunConfig, model_path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = SrfNet::load(model_path)?;
    if let Some(shifts) = &cfg.shifts {
        if shifts != model.shifts() {
            return Err(CliError::Config(format!(
                "configured shifts `{shifts}` differ from the model's `{}`",
                model.shifts()
            )));
        }
    }
    let ds = load_dataset(cfg, base_data_seed(cfg))?;
    if ds.d() != model.config.input_dim {
        return Err(CliError::Config(format!(
            "dataset has {} covariates but the model expects {}",
            ds.d(),
            model.config.input_dim
        )));
    }
    let est = SrfEstimate::from_model(&model, &ds)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let path = dir.join(CURVE_FILE);
    write_atomic(&path, &est.to_csv(cfg.percent_change))?;
    Ok(vec![path])
}

/// One line of the benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub summary: bool,
    pub dgp: String,
    pub data_family: Family,
    pub model_family: Family,
    pub basis: BasisKind,
    pub estimator: EstimatorKind,
    /// Seed index for per-seed rows.
    pub seed: Option<usize>,
    /// Root mean squared error over the shift grid; the median over seeds on summary rows.
    pub sqrt_mise: Option<f64>,
    /// Per-seed flag on tr rows; fraction of seeds on summary rows.
    pub tr_beats_plugin: Option<f64>,
    pub status: String,
}

pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub failed_jobs: usize,
    pub total_jobs: usize,
}

impl BenchTable {
    pub fn summary(&self, basis: BasisKind, model_family: Family, estimator: EstimatorKind) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.summary && r.basis == basis && r.model_family == model_family && r.estimator == estimator)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "row_type,dgp,data_family,model_family,basis,estimator,seed,sqrt_mise,tr_beats_plugin,status\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let tr_flag = match (r.summary, r.tr_beats_plugin) {
                (false, Some(v)) => (v == 1.0).to_string(),
                (_, v) => opt(v),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                if r.summary { "summary" } else { "seed" },
                r.dgp,
                r.data_family,
                r.model_family,
                r.basis.name(),
                r.estimator.name(),
                r.seed.map(|k| k.to_string()).unwrap_or_default(),
                opt(r.sqrt_mise),
                tr_flag,
                r.status
            );
        }
        s
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))
}

/// `[plugin, aipw, tr]` root-MISE for one seed and cell.
fn bench_job(cfg: &RunConfig, seed: usize, family: Family, basis: BasisKind) -> Result<[f64; 3], CliError> {
    let ds = load_dataset(cfg, base_data_seed(cfg).wrapping_add(seed as u64))?;
    let truth = oracle_srf(&ds, cfg.shifts()?)?;
    let train_cfg = TrainConfig {
        seed: cfg.train.seed.wrapping_add(seed as u64),
        ..cfg.train.clone()
    };
    let out = train_on(cfg, &ds, family, basis, &train_cfg)?;
    let est = SrfEstimate::from_model(&out.model, &ds)?;
    let root = |v: Vec<f64>| -> Result<f64, CliError> { Ok(mise(&[v], &[truth.clone()])?.sqrt()) };
    Ok([root(est.plugin())?, root(est.aipw())?, root(est.tr())?])
}

/// Runs every (basis, model family, seed) job and tabulates root-MISE.
pub fn benchmark_table(cfg: &RunConfig, jobs: usize) -> Result<BenchTable, CliError> {
    if cfg.seeds == 0 {
        return Err(CliError::Config("`seeds` must be at least 1".into()));
    }
    cfg.shifts()?;
    let bases = if cfg.bases.is_empty() {
        vec![cfg.basis]
    } else {
        cfg.bases.clone()
    };
    let families = if cfg.model_families.is_empty() {
        vec![cfg.model_family()]
    } else {
        cfg.model_families.clone()
    };
    let dgp = match &cfg.data {
        Some(DataSource::Generator { kind, .. }) => kind.name().to_string(),
        Some(DataSource::Csv(_)) => "csv".to_string(),
        None => return Err(CliError::Config("benchmark needs a dataset".into())),
    };
    let cells: Vec<(BasisKind, Family)> = bases
        .iter()
        .flat_map(|&b| families.iter().map(move |&f| (b, f)))
        .collect();
    let work: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.seeds).map(move |s| (c, s)))
        .collect();

    let pool = thread_pool(jobs)?;
    let results: Vec<Result<[f64; 3], CliError>> = pool.install(|| {
        work.par_iter()
            .map(|&(c, s)| bench_job(cfg, s, cells[c].1, cells[c].0))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failed_jobs = 0;
    for (c, &(basis, family)) in cells.iter().enumerate() {
        let cell: Vec<(usize, &Result<[f64; 3], CliError>)> = work
            .iter()
            .zip(&results)
            .filter(|((cc, _), _)| *cc == c)
            .map(|((_, s), r)| (*s, r))
            .collect();
        let ok: Vec<&[f64; 3]> = cell.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        let failures = cell.len() - ok.len();
        failed_jobs += failures;
        let base = |estimator| BenchRow {
            summary: false,
            dgp: dgp.clone(),
            data_family: cfg.data_family,
            model_family: family,
            basis,
            estimator,
            seed: None,
            sqrt_mise: None,
            tr_beats_plugin: None,
            status: String::new(),
        };
        for (s, r) in &cell {
            for &est in &cfg.estimators {
                let mut row = base(est);
                row.seed = Some(*s);
                match r {
                    Ok(v) => {
                        row.sqrt_mise = Some(v[est as usize]);
                        if est == EstimatorKind::Tr {
                            row.tr_beats_plugin = Some(if v[2] <= v[0] { 1.0 } else { 0.0 });
                        }
                        row.status = "ok".into();
                    }
                    Err(e) => {
                        log::error!("{basis}/{family} seed {s} failed: {e}", basis = basis.name());
                        row.status = format!("failed: {}", e.to_string().replace(',', ";"));
                    }
                }
                rows.push(row);
            }
        }
        for &est in &cfg.estimators {
            let mut row = base(est);
            let mut vals: Vec<f64> = ok.iter().map(|v| v[est as usize]).collect();
            vals.sort_by(f64::total_cmp);
            if !vals.is_empty() {
                row.sqrt_mise = Some(quantile(&vals, 0.5));
                if est == EstimatorKind::Tr {
                    let wins = ok.iter().filter(|v| v[2] <= v[0]).count();
                    row.tr_beats_plugin = Some(wins as f64 / ok.len() as f64);
                }
            }
            row.summary = true;
            row.status = if failures == 0 {
                "ok".into()
            } else {
                format!("partial {}/{}", ok.len(), cell.len())
            };
            rows.push(row);
        }
    }
    Ok(BenchTable {
        rows,
        failed_jobs,
        total_jobs: work.len(),
    })
}

/// Writes the benchmark table; reports failure after writing if any job crashed.
pub fn benchmark(cfg: &RunConfig, jobs: usize) -> Result<Vec<PathBuf>, CliError> {
    let table = benchmark_table(cfg, jobs)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(BENCHMARK_FILE);
    write_atomic(&path, &table.to_csv())?;
    if table.failed_jobs > 0 {
        return Err(CliError::PartialBenchmark {
            failed: table.failed_jobs,
            total: table.total_jobs,
        });
    }
    Ok(vec![path])
}

/// Single full-data model with bootstrap quartile bands.
pub fn ensemble_curve(cfg: &RunConfig, jobs: usize) -> Result<SrfEstimate, CliError> {
    if cfg.ensemble_size < 2 {
        return Err(CliError::Config(format!(
            "`ensemble_size` must be at least 2, got {}",
            cfg.ensemble_size
        )));
    }
    let ds = load_dataset(cfg, base_data_seed(cfg))?;
    let shifts = cfg.shifts()?;
    let model_cfg = cfg.model_config(ds.d(), cfg.model_family(), cfg.basis);
    let ens = bootstrap_ensemble(
        &ds,
        shifts,
        &model_cfg,
        &cfg.train,
        &EnsembleConfig {
            members: cfg.ensemble_size,
            jobs,
            vary_seed: cfg.ensemble_vary_seed,
        },
    )?;
    let full = train(&ds, shifts, &model_cfg, &cfg.train)?;
    let mut est = SrfEstimate::from_model(&full.model, &ds)?;
    for (row, q) in est.rows.iter_mut().zip(ens.quantiles) {
        row.quantiles = Some(q);
    }
    Ok(est)
}

pub fn ensemble(cfg: &RunConfig, jobs: usize) -> Result<Vec<PathBuf>, CliError> {
    let est = ensemble_curve(cfg, jobs)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(ENSEMBLE_FILE);
    write_atomic(&path, &est.to_csv(cfg.percent_change))?;
    Ok(vec![path])
}

//! Argument parsing and command dispatch for the `srf` binary.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::CliError;

#[derive(Parser)]
#[command(
    name = "srf",
    version,
    about = "Shift-response function estimation with targeted regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for benchmark and ensemble (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Training seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a dataset, its metadata and the true curve.
    Simulate,
    /// Train a model and write it with its loss history.
    Train,
    /// Estimate the curve from a saved model.
    Estimate {
        /// Model file; overrides `model_path`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Sweep seeds, bases and families and tabulate root-MISE.
    Benchmark,
    /// Bootstrap ensemble with quartile bands.
    Ensemble,
}

pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be at least 1".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Train => commands::train_model(&cfg),
        Command::Estimate { model } => {
            let path = model
                .or_else(|| cfg.model_path.clone())
                .ok_or_else(|| CliError::Config("estimate needs --model or `model_path`".into()))?;
            commands::estimate(&cfg, &path)
        }
        Command::Benchmark => commands::benchmark(&cfg, jobs),
        Command::Ensemble => commands::ensemble(&cfg, jobs),
    }
}

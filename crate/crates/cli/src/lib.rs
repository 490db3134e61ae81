//! Command implementations behind the `srf` binary.
//!
//! Every command reads a [`config::RunConfig`], writes CSV artifacts into an
//! output directory, and is deterministic given the config and seed.

use thiserror::Error;

pub mod app;
pub mod commands;
pub mod config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] srf_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Some benchmark jobs failed; the table was still written.
    #[error("{failed} of {total} benchmark jobs failed")]
    PartialBenchmark { failed: usize, total: usize },
}

impl CliError {
    /// Process exit status: 1 config, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
            CliError::Io { .. } => 3,
            CliError::PartialBenchmark { .. } => 2,
        }
    }
}

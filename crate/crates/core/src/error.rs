use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("tensor handle is not on this tape")]
    UnknownNode,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("outcome {value} at row {row} is outside the {family} outcome domain")]
    OutcomeDomain {
        family: &'static str,
        row: usize,
        value: f64,
    },

    #[error("pairwise shift column `{0}` is not available")]
    MissingPairwiseColumn(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("fluctuation for shift {shift} has no root on [{lo}, {hi}] (residuals {f_lo:e}, {f_hi:e})")]
    NoSignChange {
        shift: usize,
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("fluctuation parameters are stale; refit epsilon before computing the targeted estimate")]
    StaleEpsilon,

    #[error("dataset carries no oracle for {0}")]
    MissingOracle(String),

    #[error("index mismatch: {0}")]
    IndexMismatch(String),

    #[error("{path}: line {line}: {detail}")]
    Csv { path: PathBuf, line: usize, detail: String },

    #[error("{path}: missing mandatory column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("ensemble failed: {failed} of {total} members diverged")]
    Ensemble { failed: usize, total: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by arithmetic rather than input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::Domain { .. }
                | Error::NonScalarRoot { .. }
                | Error::UnknownNode
                | Error::Divergence { .. }
                | Error::NoSignChange { .. }
                | Error::StaleEpsilon
                | Error::Ensemble { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Csv { .. } | Error::MissingColumn { .. } | Error::ModelFormat(_)
        )
    }
}

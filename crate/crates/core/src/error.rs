use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("label `{label}` is degenerate: {positives} positives, {negatives} negatives")]
    DegenerateLabel {
        label: String,
        positives: usize,
        negatives: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value in {what} at step {step}")]
    Divergence { what: String, step: usize },

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("split failed: {0}")]
    Split(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing prerequisite {}", path.display())]
    Missing { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, missing files)
    /// rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Missing { .. } | Error::Parse(_) | Error::DegenerateLabel { .. }
        )
    }
}

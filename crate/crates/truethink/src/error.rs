//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A record in a dataset file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A dataset-level consistency problem (duplicate ids, empty dataset, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Splitting a dataset failed (too few problems, bad ratios).
    #[error("split error: {0}")]
    Split(String),

    /// Exhaustive perturbation enumeration would exceed the configured cap.
    #[error("enumeration error: {0}")]
    Enumeration(String),

    /// A backend was called outside its declared contract (missing
    /// capability, layer out of range, overlapping hooks, bad arguments).
    #[error("backend contract error: {0}")]
    Contract(String),

    /// Generation stopped before an answer could be produced.
    #[error("truncated generation: {0}")]
    Truncated(String),

    /// A threshold selection produced an empty class.
    #[error("selection error: {0}")]
    Selection(String),

    /// A synthetic world specification is internally inconsistent.
    #[error("world spec error: {0}")]
    WorldSpec(String),

    /// A run configuration is invalid (missing paths, bad thresholds).
    #[error("config error: {0}")]
    Config(String),

    /// Reading or writing run records failed.
    #[error("record error: {0}")]
    Record(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. 0 is success; 1 config error,
    /// 2 partial item failures, 3 empty selection.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Selection(_) => 3,
            Error::Config(_) | Error::Parse { .. } | Error::Dataset(_) | Error::Split(_) => 1,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

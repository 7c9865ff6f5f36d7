use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: expected {expected} fields, found {found}")]
    Schema {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid state: {0}")]
    State(&'static str),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("matrix is not positive definite: pivot {index} = {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible artifacts: {0}")]
    Compatibility(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Empty(_) => "empty_input",
            Error::Dimension { .. } => "dimension",
            Error::State(_) => "state",
            Error::Numeric(_) => "numeric",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Compatibility(_) => "compatibility",
            Error::Json(_) => "json",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("value outside transform domain: {0}")]
    Domain(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (parameter norm {param_norm:.6e})")]
    Diverged {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("shape mismatch in {path}: {reason}")]
    ShapeMismatch { path: PathBuf, reason: String },

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    /// Short machine-parsable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Domain(_) => "domain",
            Error::DegenerateVariance(_) => "degenerate-variance",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::Unsupported(_) => "unsupported",
            Error::Corrupt { .. } => "corrupt",
            Error::VersionMismatch { .. } => "version",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Integrity(_) => "integrity",
            Error::Internal(_) => "internal",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serialization",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

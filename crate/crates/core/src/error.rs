use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A non-positive pivot was met while factorising; `pivot` is zero-based.
    #[error("decomposition failed at pivot {pivot} (value {value:e})")]
    Decomposition { pivot: usize, value: f64 },

    /// The log of a non-positive likelihood estimate was requested.
    #[error("estimator domain error at level {level}, theta = {theta:?}: {reason}")]
    Estimator {
        theta: Vec<f64>,
        level: usize,
        reason: String,
    },

    /// The model does not provide what the caller asked for (for example a
    /// reparameterization chain through non-differentiable summaries).
    #[error("capability error: {0}")]
    Capability(String),

    #[error("ingestion error at row {row}: {reason}")]
    Ingestion { row: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches iteration context to an estimator failure raised deep inside a
    /// correction; other variants pass through untouched.
    pub fn in_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Estimator {
                theta,
                level,
                reason,
            } => Error::Estimator {
                theta,
                level,
                reason: format!("iteration {iteration}: {reason}"),
            },
            other => other,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {context}: {message}")]
    Format { context: String, message: String },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("design matrix is rank deficient (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (after jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("state invariant violated: {0}")]
    StateInvariant(String),

    #[error("state version mismatch: found {found}, expected {expected}")]
    StateVersion { found: String, expected: String },

    #[error("stage {stage} failed on {unit}: {source}")]
    Stage {
        stage: &'static str,
        unit: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, unit: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            unit: unit.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlorError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch([usize; 3], [usize; 3]),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("degenerate direction: |J v| = {0:e} below threshold")]
    DegenerateDirection(f64),

    #[error("histogram has zero total mass")]
    ZeroMass,

    #[error("zero variance input")]
    ZeroVariance,

    #[error("objective is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("transform document: {0}")]
    Serde(#[from] serde_json::Error),
}

impl FlorError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlorError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FlorError::InvalidParameter(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, FlorError>;

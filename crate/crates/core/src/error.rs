use thiserror::Error;

/// Errors produced by the registration gold-standard engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not positive definite after {retries} jitter escalations")]
    NotPositiveDefinite { retries: usize },

    #[error("degenerate covariance: {0}")]
    Degenerate(String),

    #[error("empty candidate pool")]
    EmptyPool,

    #[error("point {0:?} lies outside the field domain")]
    OutsideDomain(Vec<f64>),

    #[error("annotator callback failed: {0}")]
    Callback(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

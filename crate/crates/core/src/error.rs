use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point outside transform domain: {0}")]
    Domain(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("gaussian process fit failed: {0}")]
    GpFit(String),

    #[error("run file field `{field}`: {reason}")]
    Parse { field: String, reason: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient for stacked entry {entry} (run {run}, component {component})")]
    NonFiniteGradient {
        entry: usize,
        run: usize,
        component: usize,
    },

    #[error("run pool unreachable after {attempts} attempts: {report}")]
    PoolUnreachable { attempts: usize, report: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular matrix: pivot magnitude {0} below threshold")]
    SingularMatrix(f64),
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),
    #[error("unsupported size: n = {n} exceeds dense cap {cap}")]
    UnsupportedSize { n: usize, cap: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("solver did not converge: residual {residual} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

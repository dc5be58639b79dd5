use alloc::string::String;

/// Errors raised by the prototype-generation engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {0} has no points")]
    EmptyClass(usize),
    #[error("need at least 2 points to estimate covariance, got {0}")]
    InsufficientPoints(usize),
    #[error("attention over an empty key set")]
    EmptyKeys,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = core::result::Result<T, Error>;

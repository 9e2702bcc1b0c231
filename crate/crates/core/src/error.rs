use thiserror::Error;

/// Errors raised by the simulation modules.
///
/// Configuration and contract errors are raised before any expensive work
/// starts; the numerical variants flag a run whose output cannot be trusted.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("discretization too coarse: {0}")]
    Discretization(String),

    #[error("eigenpair inconsistency: {0}")]
    EigenInconsistency(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("statistical error: {0}")]
    Statistical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

use thiserror::Error;

/// Errors raised by the library. Each variant maps to a stable numeric
/// code used by the CLI exit status and the C ABI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("series truncation could not reach the requested accuracy: {0}")]
    Truncation(String),
    #[error("numerical consistency check failed: {0}")]
    Consistency(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("regime error: {0}")]
    Regime(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error code, also used as process exit status.
    pub fn code(&self) -> i32 {
        match self {
            Error::Domain(_) => 2,
            Error::Resource(_) => 3,
            Error::Truncation(_) => 4,
            Error::Consistency(_) => 5,
            Error::Quadrature(_) => 6,
            Error::Regime(_) => 7,
            Error::Format(_) => 8,
            Error::Io(_) => 9,
            Error::Json(_) => 8,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use domain;

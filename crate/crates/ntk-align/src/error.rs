//! Crate-wide error type with an exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A metric whose defining formula divides by a vanishing quantity.
    /// Returned explicitly instead of a silent 0 or NaN.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Non-finite values appeared during training or integration.
    #[error("divergence: {0}")]
    Divergence(String),

    /// A stability precondition failed; the message carries the computed bound.
    #[error("unstable: {0}")]
    Unstable(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    /// Malformed file contents (bad magic, inconsistent header, truncation).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for config/validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::NoSolution(_) => 1,
            Error::UndefinedMetric(_)
            | Error::Divergence(_)
            | Error::Unstable(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

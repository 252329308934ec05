//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    /// Stable one-word category used by the CLI for machine-parsable errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Invalid(_) => "invalid",
            Error::MissingGrad(_) => "grad",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "nonfinite",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

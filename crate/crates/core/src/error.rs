use std::io;

use thiserror::Error;

/// Errors surfaced by the pipeline.
///
/// Each variant maps to a stable machine-readable category (see [`Error::category`]),
/// which the command-line front end prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::InvalidInput(_) => "input",
            Error::Divergence(_) => "training",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

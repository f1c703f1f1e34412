use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of a command; every variant has a one-word category for the
/// machine-parsable error line.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Artifact(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Lock(String),
    #[error(transparent)]
    Core(#[from] weaklab_core::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Artifact(_) => "artifact",
            CliError::Io { .. } => "io",
            CliError::Lock(_) => "lock",
            CliError::Core(e) => e.category(),
        }
    }

    /// 2 for configuration problems (including bad flags), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.category() == "config" {
            2
        } else {
            1
        }
    }

    /// `error: category=<c> message="<m>"`, always on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ").replace('"', "'");
        format!("error: category={} message=\"{}\"", self.category(), msg)
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub type Result<T> = std::result::Result<T, CliError>;

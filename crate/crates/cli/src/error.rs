//! Errors the CLI maps onto exit codes.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config key {key}: {reason}")]
    ConfigInvalid { key: String, reason: String },
    #[error("missing {artifact}; run `flowdistill {producer}` first")]
    DependencyMissing {
        artifact: PathBuf,
        producer: &'static str,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(flowdistill::Error),
}

impl CliError {
    pub fn from_core(e: flowdistill::Error) -> Self {
        match e {
            flowdistill::Error::ConfigInvalid { key, reason } => {
                CliError::ConfigInvalid { key, reason }
            }
            other => CliError::Core(other),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid { .. } => 2,
            CliError::DependencyMissing { .. } => 3,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}

impl From<flowdistill::Error> for CliError {
    fn from(e: flowdistill::Error) -> Self {
        CliError::from_core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

//! Command implementations behind the `fedhd` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fedhd_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// A core validation failure raised while reading configuration.
    pub fn invalid(e: fedhd_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 1 for usage and configuration errors, 2 for everything that fails
    /// once work has started.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

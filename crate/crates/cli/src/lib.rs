//! Configuration, persistence and experiment drivers behind the `subflow`
//! command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod output;
pub mod pipeline;

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] subflow::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),

    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(_) | CliError::Io { .. } => 2,
            CliError::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 2,
            CliError::Csv(_) | CliError::Json(_) | CliError::Check(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

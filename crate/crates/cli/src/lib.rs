//! Orchestration behind the `stci` binary.

pub mod commands;
pub mod config;
pub mod figures;
pub mod report;

use std::path::{Path, PathBuf};

pub use commands::{run, Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] stci::Error),

    #[error("{0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 validation or configuration, 3 numerical divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(e) if e.is_persistence() => 4,
            CliError::Core(_) | CliError::Validation(_) => 2,
            CliError::Io { .. } | CliError::Image { .. } => 4,
        }
    }
}

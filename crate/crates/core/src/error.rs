use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical divergence in variable {variable} at step {step}")]
    Divergence { variable: &'static str, step: usize },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("schema mismatch: expected version {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by numerical blow-up rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Training { .. })
    }

    /// True for persistence failures (I/O, missing or malformed files).
    pub fn is_persistence(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::MissingFile(_)
                | Error::SchemaMismatch { .. }
                | Error::Truncated { .. }
                | Error::Manifest { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("data file {path}: {message}")]
    Schema { path: String, message: String },

    #[error("data file {path}: unbalanced panel, {message}")]
    UnbalancedPanel { path: String, message: String },

    #[error(transparent)]
    Compute(#[from] swcrt_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad input, 3 for numerical failures, 4 for file system errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. }
            | CliError::Validation(_)
            | CliError::Schema { .. }
            | CliError::UnbalancedPanel { .. } => 2,
            CliError::Compute(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

use std::path::PathBuf;

use cooptrack_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoopError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("missing checkpoint file(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingCheckpoint(Vec<PathBuf>),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CoopError>;

impl CoopError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoopError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapsError {
    #[error("cannot read {path}: {source}")]
    Load { path: PathBuf, source: std::io::Error },

    #[error("{file}:{line}: malformed record: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("{file}:{line}: {message}")]
    Integrity { file: String, line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch for parameter {name}: expected {expected:?}, found {found:?}")]
    Shape { name: String, expected: (usize, usize), found: (usize, usize) },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MapsError> = std::result::Result<T, E>;

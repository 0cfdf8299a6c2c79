use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("category must be in 1..=5, got {0}")]
    InvalidCategory(u8),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("no valid initial conditions for category {category} (seed {seed}) after {attempts} attempts")]
    RejectionExhausted { category: u8, seed: u64, attempts: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed dataset: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, SimError>;

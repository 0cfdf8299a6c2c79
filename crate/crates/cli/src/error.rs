use std::path::PathBuf;

use physcon::CoreError;
use sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Encode { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invariant failed: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

fn sim_code(e: &SimError) -> i32 {
    match e {
        SimError::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Io { .. } | CliError::Encode { .. } => EXIT_DATA,
            CliError::Sim(e) => sim_code(e),
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_) | CoreError::UnboundSlot(_) => EXIT_USAGE,
                CoreError::NonFinite { .. }
                | CoreError::Divergence { .. }
                | CoreError::Singular(_)
                | CoreError::Autodiff(_) => EXIT_NUMERIC,
                CoreError::Sim(s) => sim_code(s),
                _ => EXIT_DATA,
            },
        }
    }
}

pub fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

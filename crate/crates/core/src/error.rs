use std::path::PathBuf;

use autodiff::AutodiffError;
use sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    LatentDim { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("frame size mismatch: decoder expects {expected:?}, frames are {got:?}")]
    FrameMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("stage {stage} does not accept category {category}")]
    StageMismatch { stage: u8, category: u8 },
    #[error("dataset has no episodes for stage {0}")]
    EmptyStage(u8),
    #[error("training diverged at iteration {iteration} (seed {seed})")]
    Divergence { iteration: usize, seed: u64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("slot {0} is not bound to any object")]
    UnboundSlot(usize),
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("need at least {need} evaluation episodes, got {got}")]
    TooFewEpisodes { need: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: checkpoint version {found} is not supported (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("missing checkpoint for arm {0}")]
    MissingCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

use std::path::PathBuf;

/// Errors raised anywhere in the change-detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {detail}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-monotone timestamps: {0}")]
    NonMonotoneTimestamps(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid input size {height}x{width}: both must be divisible by {divisor}")]
    InvalidInputSize {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("rows are not unit-normalized (max deviation {0:.3e})")]
    NotNormalized(f64),

    #[error("no eligible pixels: {0}")]
    NoEligiblePixels(String),

    #[error("missing ground truth for scene {0}")]
    MissingGroundTruth(String),

    #[error("architecture hash mismatch: checkpoint {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

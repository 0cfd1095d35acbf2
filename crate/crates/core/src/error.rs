use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable audio file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("audio contains no samples: {0}")]
    EmptyAudio(String),

    #[error("clip too short: need {needed} samples, have {available}")]
    ClipTooShort { needed: usize, available: usize },

    #[error("spectrogram is already normalized")]
    AlreadyNormalized,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite activation in {stage}: {detail}")]
    NonFiniteActivation { stage: String, detail: String },

    #[error("class {0} has no support embeddings")]
    EmptyClass(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dataset root does not exist: {0}")]
    MissingRoot(PathBuf),

    #[error("episode pool too small: {0}")]
    PoolTooSmall(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected {
        step: usize,
        loss: f64,
        /// Parameters from the last step with a finite loss.
        last_good: Option<Box<crate::nn::Checkpoint>>,
    },

    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("nothing to report")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}

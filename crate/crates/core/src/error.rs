//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid WAV file {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("audio error: {0}")]
    Audio(String),

    #[error("alignment error in {path}: {reason}")]
    Alignment { path: PathBuf, reason: String },

    #[error("unknown phoneme label {label:?} (line {line})")]
    UnknownPhoneme { label: String, line: usize },

    #[error("phoneme {label:?} has no observed frames")]
    EmptyPhoneme { label: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("sampling failed at step {step} (t = {t}): non-finite state")]
    NonFiniteState { step: usize, t: f64 },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("speaker {0:?} not found")]
    SpeakerNotFound(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

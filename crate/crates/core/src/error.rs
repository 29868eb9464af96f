use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on shape.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is outside the operation's domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An operation was invoked in the wrong state (e.g. backward without a train-mode cache).
    #[error("invalid state: {0}")]
    State(String),

    /// Malformed checkpoint file.
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Malformed annotation manifest.
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, step {step} (frames {frames:?})")]
    NonFinite {
        epoch: usize,
        step: usize,
        frames: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}

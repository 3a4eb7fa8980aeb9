//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Everything that can go wrong building, training, or serializing a model.
#[derive(Debug)]
pub enum PadError {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// A scalar argument is outside its legal range.
    InvalidArgument(String),
    /// A gradient contained NaN or infinity; the optimizer refuses the step.
    NonFiniteGradient {
        param: String,
    },
    /// Configuration failed validation. `field` is the dotted path of the
    /// first offending field, e.g. `pad.kappa`.
    Config {
        field: String,
        message: String,
    },
    /// A binary file (checkpoint, IDX, CIFAR) is malformed. `offset` is the
    /// byte position where parsing gave up.
    Format {
        offset: u64,
        message: String,
    },
    /// The batch stream ran out before partition step `step` got its data.
    DataExhausted {
        step: usize,
    },
    /// Training loss became non-finite or exceeded the divergence bound.
    Diverged {
        epoch: usize,
        loss: f64,
    },
    /// The named layer was asked to compact a second time.
    AlreadyCompacted(String),
    Io(io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for PadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PadError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            PadError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            PadError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            PadError::Config { field, message } => {
                write!(f, "config error at `{field}`: {message}")
            }
            PadError::Format { offset, message } => {
                write!(f, "malformed file at byte {offset}: {message}")
            }
            PadError::DataExhausted { step } => {
                write!(f, "data stream exhausted before partition step {step}")
            }
            PadError::Diverged { epoch, loss } => {
                write!(f, "training diverged at epoch {epoch} (loss {loss})")
            }
            PadError::AlreadyCompacted(layer) => {
                write!(f, "layer `{layer}` is already compacted")
            }
            PadError::Io(e) => write!(f, "io error: {e}"),
            PadError::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for PadError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PadError::Io(e) => Some(e),
            PadError::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for PadError {
    fn from(e: io::Error) -> Self {
        PadError::Io(e)
    }
}

impl From<serde_json::Error> for PadError {
    fn from(e: serde_json::Error) -> Self {
        PadError::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, PadError>;

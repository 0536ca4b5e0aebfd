use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or extents do not fit the operation.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// An invariant of a configuration struct is violated.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("occlusion mask generation failed after {attempts} attempts")]
    MaskGeneration { attempts: usize },

    #[error("invalid sequence spec: {0}")]
    SequenceSpec(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("missing record `{0}`")]
    MissingRecord(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }
}

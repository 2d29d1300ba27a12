//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for an operation.
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// A class index or element index out of range.
    #[error("index {index} out of range for {context} of size {len}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },

    /// Invalid configuration (bad architecture id, indivisible shapes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A malformed binary payload (IDX, checkpoint, mask bitset).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Unrecognized serialized version.
    #[error("unsupported {what} version {found} (supported: {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    /// A value outside its allowed range.
    #[error("range error: {0}")]
    Range(String),

    /// A non-finite value surfaced where the numeric contract forbids it.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    TrainingDiverged { epoch: usize, batch: usize, loss: f32 },

    /// A probe could not gather enough correct masked predictions.
    #[error("insufficient signal: {achieved} correct predictions of {required} required after {drawn} samples")]
    InsufficientSignal {
        achieved: usize,
        required: usize,
        drawn: usize,
    },

    /// A caller violated an operation's stated precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

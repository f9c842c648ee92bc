//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any part of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch; carries both offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Token id outside the vocabulary.
    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: usize, vocab_size: usize },

    /// Sequence longer than the model's maximum.
    #[error("sequence length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },

    /// Input corpora malformed or misaligned.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint version or structure mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (NaN loss); the last finite checkpoint is preserved.
    #[error("training diverged at step {step}; last good checkpoint retained")]
    Diverged { step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

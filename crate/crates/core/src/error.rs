//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operands whose shapes cannot be combined.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value (bad rate, unknown split name, ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// A parameter update could not be applied.
    #[error("optimizer: missing gradient for parameter `{0}`")]
    MissingGrad(String),

    /// SCAN command that the grammar cannot derive.
    #[error("cannot parse SCAN command at token {position}: {message}")]
    Parse { position: usize, message: String },

    /// Malformed data file.
    #[error("{path}:{line}: {message}")]
    DataFormat {
        path: String,
        line: usize,
        message: String,
    },

    /// Loss over zero non-ignored positions, empty corpora and the like.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Token id outside the vocabulary.
    #[error("invalid token id {id} for vocabulary of size {vocab_size}")]
    InvalidTokenId { id: u32, vocab_size: usize },

    /// Checkpoint file rejected on load.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

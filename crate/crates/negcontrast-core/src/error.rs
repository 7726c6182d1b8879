//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector with (near-)zero L2 norm cannot be normalized.
    #[error("zero vector: L2 norm below 1e-12")]
    ZeroVector,

    /// Two operands disagree on embedding dimension or row count.
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    /// Batch shape does not describe its backing buffer.
    #[error("invalid batch shape: {rows}x{dim} with buffer length {len}")]
    InvalidShape { rows: usize, dim: usize, len: usize },

    #[error("temperature must be positive, got {temperature}")]
    NonPositiveTemperature { temperature: f64 },

    /// Caption text does not conform to the grammar.
    #[error("parse error at token {position}: {message}")]
    ParseError { position: usize, message: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("vocabulary too small: category '{category}' needs {needed}, has {available}")]
    VocabTooSmall {
        category: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("split would leave one side empty")]
    EmptySplit,

    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },

    #[error("unknown concept id {id} (basis has {count} concepts)")]
    UnknownConcept { id: u32, count: usize },

    #[error("token list must be nonempty")]
    EmptyTokenList,

    #[error("parameter/gradient shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("classification needs at least two classes")]
    SingleClass,

    #[error("not enough distinct '{category}' entries for a perturbation draw")]
    InsufficientVocab { category: &'static str },

    #[error("caption has {k} pair(s); this perturbation needs at least {needed}")]
    KTooSmall { k: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u32, got: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failure: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

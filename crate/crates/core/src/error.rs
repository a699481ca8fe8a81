//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFiniteInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence of length {len} exceeds max positions {max}")]
    ExceedsMaxPositions { len: usize, max: usize },

    #[error("query too long: {needed} tokens needed, max sequence length is {max}")]
    QueryTooLong { needed: usize, max: usize },

    #[error("overlap must be smaller than group size (o={overlap}, n={group})")]
    OverlapTooLarge { overlap: usize, group: usize },

    #[error("calibration requires m >= 1")]
    EmptyPrototypes,

    #[error("non-scalar loss: shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),

    #[error("duplicate doc_id: {0}")]
    DuplicateDocId(String),

    #[error("duplicate query id: {0}")]
    DuplicateQueryId(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("invalid index file: {0}")]
    InvalidIndex(String),

    #[error("label outside {{0,1}}: {0}")]
    InvalidLabel(f64),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input")]
    EmptyInput,

    #[error("{0}")]
    Invalid(String),

    #[error("label must be 0 or 1, got {0}")]
    Label(f64),

    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("word not in lexicon: {0:?}")]
    MissingWord(String),

    #[error("unknown phoneme {phoneme:?} on line {line}")]
    UnknownPhoneme { phoneme: String, line: usize },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("scored set must contain both positive and negative labels")]
    SingleClass,

    #[error("corpus constraint violated: {0}")]
    Constraint(String),

    #[error("non-finite loss at step {step} (pairs {pairs:?})")]
    NonFinite { step: usize, pairs: Vec<usize> },

    #[error("bad {0} header")]
    BadHeader(&'static str),

    #[error("unsupported {kind} format version {version}")]
    Version { kind: &'static str, version: u32 },

    #[error("tensor shape mismatch against config:\n{0}")]
    ShapeMismatch(String),

    #[error("config conflict: {0}")]
    ConfigConflict(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

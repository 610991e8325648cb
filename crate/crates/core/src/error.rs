//! Shared error type for the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("vocab id {id} out of range for vocabulary of size {vocab_size}")]
    VocabIdOutOfRange { id: usize, vocab_size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("exhaustive search budget exceeded: needs {required} evaluations, guard is {guard}")]
    OracleBudget { required: u64, guard: u64 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

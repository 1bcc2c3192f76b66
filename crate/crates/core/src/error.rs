use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sequence spec: {0}")]
    InvalidSpec(String),
    #[error("invalid token {token} at position {position} (alphabet size {alphabet})")]
    InvalidToken {
        token: Token,
        position: usize,
        alphabet: usize,
    },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("ordering is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("revealed count {count} out of range 0..={len}")]
    RevealOutOfRange { count: usize, len: usize },
    #[error("probability row invalid: {0}")]
    InvalidRow(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("impossible context: conditioning tokens have zero probability")]
    ImpossibleContext,
    #[error("token {0} has zero draft probability and could not have been drafted")]
    UndraftableToken(Token),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("sequence has zero likelihood under the model")]
    ZeroLikelihood,
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use crate::types::Token;

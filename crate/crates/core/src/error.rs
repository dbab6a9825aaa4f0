//! Error type shared across the core crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("sequence length {len} not divisible by latent rate {rate}")]
    NotDivisible { len: usize, rate: usize },
    #[error("joint count {0} too small (minimum 12)")]
    JointCountTooSmall(usize),
    #[error("unknown speaker id {0}")]
    UnknownSpeaker(usize),
    #[error("token {token} out of range for codebook size {k}")]
    TokenOutOfRange { token: usize, k: usize },
    #[error("codec must be frozen before stage-2 use")]
    CodecNotFrozen,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("negative variance passed to {0}")]
    NegativeVariance(&'static str),
    #[error("input too short in {context}: need {need}, got {got}")]
    TooShort {
        context: &'static str,
        need: usize,
        got: usize,
    },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no onsets supplied")]
    EmptyOnsets,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

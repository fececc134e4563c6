//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GemError>;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid bit-width {0} (expected 1..=32)")]
    InvalidBitWidth(u32),

    #[error("invalid quantizer range {0} (must be finite and > 0)")]
    InvalidRange(f64),

    #[error("negative loss component `{name}` = {value}")]
    NegativeLoss { name: &'static str, value: f64 },

    #[error("zero capacity")]
    ZeroCapacity,

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("out-of-vocabulary token {token} (vocabulary size {vocab_size})")]
    OutOfVocabulary { token: u32, vocab_size: u32 },

    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("more clusters than points (k = {k}, n = {n})")]
    TooManyClusters { k: usize, n: usize },

    #[error("undefined gap: in-domain performance is zero")]
    UndefinedGap,

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("value `{name}` = {value} outside [0, 1]")]
    OutOfUnitRange { name: String, value: f64 },

    #[error("sequence length {len} exceeds configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GemError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        GemError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        GemError::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

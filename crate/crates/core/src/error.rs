use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("token id {id} out of range at position {position} (allowed [{lo}, {hi}))")]
    IdOutOfRange {
        position: usize,
        id: u32,
        lo: u32,
        hi: u32,
    },

    #[error("mask token present at position {0}")]
    MaskPresent(usize),

    #[error("{name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("support of {size} outcomes exceeds the enumeration limit {limit}")]
    SupportTooLarge { size: u128, limit: u128 },

    #[error("need at least {needed} distinct patches, found {found}")]
    TooFewPatches { needed: usize, found: usize },

    #[error("codebook is not fitted")]
    UnfittedCodebook,

    #[error("non-finite loss at step {step}: t = {t_values:?}, masked counts = {mask_counts:?}")]
    NonFiniteLoss {
        step: u64,
        t_values: Vec<f64>,
        mask_counts: Vec<usize>,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    /// Unrecognized magic bytes or format version.
    #[error("unsupported checkpoint format: found {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

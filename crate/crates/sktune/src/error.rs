//! Crate-wide error type.

/// Errors surfaced by tensor ops, the model, data loading, training and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called on a tensor with no tape node")]
    NoTape,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prefix has {got} layers but the model has {want}")]
    PrefixLayerMismatch { got: usize, want: usize },
    #[error("input sequence must be non-empty")]
    SequenceEmpty,
    #[error("prefix length must be at least 1")]
    IllegalPrefixLength,
    #[error("lora rank {rank} not in 1..={max}")]
    BadRank { rank: usize, max: usize },
    #[error("missing gradient for trainable parameter {0}")]
    MissingGrad(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("line {line}: malformed jsonl record")]
    MalformedLine { line: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("line {line}: unknown or invalid label")]
    UnknownLabel { line: usize },
    #[error("split fractions must be non-negative and sum to 1")]
    BadFractions,
    #[error("empty input where at least one element is required")]
    Empty,
    #[error("mcc requires binary predictions and labels")]
    NonBinary,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

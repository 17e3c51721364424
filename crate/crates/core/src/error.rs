use thiserror::Error;

/// Errors raised anywhere in the annotation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("plaintext entry {value} at index {index} exceeds bound {bound}")]
    PlaintextOutOfRange {
        index: usize,
        value: String,
        bound: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter contract violated: {0}")]
    Overflow(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("OPE input {value} outside domain of {bits} bits")]
    OpeDomain { value: i64, bits: u32 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("entry {value} exceeds expansion width {beta}")]
    ExpansionOverflow { value: u32, beta: u32 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("no cipher for image {0}")]
    MissingCipher(u32),

    #[error("unknown request id {0}")]
    UnknownRequest(u64),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("keyword sealing failed: {0}")]
    Seal(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("size cap exceeded: {what} needs {needed} qubits, cap is {cap}")]
    SizeCap {
        what: &'static str,
        needed: usize,
        cap: usize,
    },

    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("noise scaling: {0}")]
    NoiseScaling(String),

    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),

    #[error("retraction failed: {0}")]
    Retraction(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty shadow set")]
    EmptySet,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad user input or unreadable files rather than by numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidSize(_)
                | Error::SizeCap { .. }
                | Error::Parse(_)
                | Error::InvalidNoiseModel(_)
                | Error::NoiseScaling(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

use thiserror::Error;

/// Errors produced by the network engine.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at layer `{layer}`: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },
    #[error("architecture mismatch: `{0}` vs `{1}`")]
    ArchMismatch(String, String),
    #[error("tape does not match model `{0}`: stale weights or tape from another forward")]
    StaleTape(String),
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

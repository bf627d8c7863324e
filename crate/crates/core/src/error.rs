use thiserror::Error;

/// Simulator-level errors. `Config` maps to CLI exit code 1, `NonFinite`
/// to exit code 2; everything else is a generic failure.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("numerical failure: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Engine(#[from] fedroute_nn::NnError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        SimError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error in record '{id}' at offset {offset}: {msg}")]
    Validation { id: String, offset: usize, msg: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("numeric error in {context}: {msg}")]
    Numeric { context: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Numeric { .. } => 4,
            _ => 3,
        }
    }
}

//! Crate-wide error type.
//!
//! Recoverable failures (I/O, malformed data, bad configuration) surface as
//! [`Error`]. Contract violations inside the numeric layers (shape
//! mismatches, empty inputs where the caller guarantees non-empty) panic
//! instead: they are programming errors, not runtime conditions.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path} as JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("schema validation failed for database `{db_id}`: {message}")]
    SchemaValidation { db_id: String, message: String },

    #[error("interaction validation failed: {0}")]
    InteractionValidation(String),

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("SQL parse error at token {position}: {message}")]
    SqlParse { position: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("embedding lookup failed: no entry for key `{0}`")]
    EmbeddingLookup(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

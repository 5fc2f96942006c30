use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, emptiness).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Invalid configuration value.
    #[error("invalid config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    /// Malformed persisted data (checkpoint, map dump, manifest).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

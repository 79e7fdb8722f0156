use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("length error: requested {requested} tokens, limit is {limit}")]
    Length { requested: usize, limit: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("format version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed atom count line {text:?}")]
    MalformedCount { line: usize, text: String },

    #[error("line {line}: unknown element symbol {symbol:?}")]
    UnknownElement { line: usize, symbol: String },

    #[error("line {line}: bad atom record {text:?}")]
    BadAtomLine { line: usize, text: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("condition nodes not centered (|mean| = {0:e})")]
    Uncentered(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("chemistry table: {0}")]
    Table(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

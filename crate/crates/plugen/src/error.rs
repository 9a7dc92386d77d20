//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An API precondition was violated (shape mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged or received unusable gradients.
    #[error("training error: {0}")]
    Training(String),

    /// The exact synthetic inverse was asked to invert an off-range point.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Dimensions of two artifacts (config, dataset, checkpoint) disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A file has the wrong schema, magic, version, or field layout.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI. Each failure class gets its own code so
    /// scripts can tell them apart.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile(_) => 2,
            Error::Schema(_) | Error::Json(_) => 3,
            Error::Dimension(_) => 4,
            Error::Contract(_) => 5,
            Error::Numeric(_) | Error::Training(_) => 6,
            Error::Oracle(_) => 7,
            Error::Io(_) => 8,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("schema version mismatch in {}: expected {expected}, found {}", path.display(), found.map_or("none".to_string(), |v| v.to_string()))]
    SchemaVersion { path: PathBuf, expected: u32, found: Option<u32> },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },
    #[error("empty split: {0}")]
    EmptySplit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

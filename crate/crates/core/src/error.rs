use std::path::PathBuf;

use thiserror::Error;

use crate::mask::Chunk;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("chunk {chunk:?} out of bounds for {n_rows} rows")]
    Bounds { chunk: Chunk, n_rows: usize },

    #[error("invalid latency table: {0}")]
    Table(String),

    #[error("budget {budget} exceeds row count {n_rows}")]
    Budget { budget: usize, n_rows: usize },

    #[error("exhaustive search limited to {max} rows, got {n_rows}")]
    Size { n_rows: usize, max: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error in {location}: {message}")]
    Format { location: String, message: String },

    #[error("file {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("read of chunk {chunk:?} failed: {message}")]
    Read { chunk: Chunk, message: String },

    #[error("direct access unsupported for {path}: {source}")]
    DirectUnsupported {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("device error: {0}")]
    Device(#[from] std::io::Error),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 input error, 3 device/I-O error, 4 invariant violation.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Bounds { .. }
            | Error::Table(_)
            | Error::Budget { .. }
            | Error::Size { .. }
            | Error::LengthMismatch { .. }
            | Error::Input(_)
            | Error::Format { .. } => 2,
            Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::File { .. }
            | Error::Read { .. }
            | Error::DirectUnsupported { .. }
            | Error::Device(_) => 3,
            Error::Invariant(_) => 4,
        }
    }
}

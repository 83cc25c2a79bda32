use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports. The CLI maps variants onto exit codes
/// through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error in {file}: {message}")]
    Format { file: String, message: String },

    #[error("dimension mismatch in {file}: expected {expected}, found {actual}")]
    Dimension {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("data error at sample {sample}: {message}")]
    Data { sample: usize, message: String },

    #[error("linkage error for sample {sample_id}: {message}")]
    Linkage { sample_id: i64, message: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("score {score} unavailable: {reason}")]
    Capability { score: String, reason: String },

    #[error("member selection error: {0}")]
    Selection(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("configuration error: {0}")]
    Config(String),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            message: message.into(),
        }
    }

    pub fn dimension(
        file: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            file: file.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Fit(_) | Error::Numerical(_) | Error::Selection(_) => ErrorKind::Numerical,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Dimension { .. }
            | Error::Data { .. }
            | Error::Linkage { .. }
            | Error::Capability { .. }
            | Error::Evaluation(_) => ErrorKind::Data,
        }
    }
}

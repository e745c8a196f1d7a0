use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: header mismatch, expected `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: timestamp is not after the previous row")]
    NonMonotone { path: PathBuf, line: u64 },

    #[error("invalid threshold scheme: {0}")]
    Scheme(String),

    #[error("degenerate quantization: {0}")]
    Quantization(String),

    #[error("cannot interpolate a series with no observed values")]
    EmptySeries,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("incomplete day {date}: windows without weather data: {missing:?}")]
    IncompleteDay { date: String, missing: Vec<usize> },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by the caller's inputs rather than by the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Divergence { .. })
    }
}

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("word vector missing for token `{token}` (category `{category}`)")]
    MissingToken { token: String, category: String },

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("input size {size} is not divisible by the backbone stride {stride}")]
    Stride { size: usize, stride: usize },

    #[error("unknown ablation flag `{0}` (expected one of no-gcn, no-ca, no-sa)")]
    UnknownAblation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible co-occurrence matrix: {0}")]
    Cooccurrence(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; batch dumped to {dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownAblation(_)
                | Error::Cooccurrence(_)
                | Error::Vocabulary(_)
                | Error::MissingToken { .. }
        )
    }
}

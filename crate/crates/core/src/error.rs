use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown event type {0:?}")]
    UnknownEventType(String),

    #[error("sentence {sent_id}: char offset {offset} out of bounds")]
    OffsetOutOfBounds { sent_id: String, offset: usize },

    #[error("insufficient exemplars for event type {0:?}")]
    InsufficientExemplars(String),

    #[error("topic {0:?} has no positive sentences to test")]
    EmptyPositivePool(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("empty response")]
    EmptyResponse,

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("degenerate AUC: {correct} correct and {incorrect} incorrect predictions")]
    DegenerateAuc { correct: usize, incorrect: usize },

    #[error("{key}: {source}")]
    Gateway {
        key: String,
        #[source]
        source: GatewayError,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

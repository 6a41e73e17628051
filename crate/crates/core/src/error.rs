use std::path::PathBuf;

use thiserror::Error;

use crate::llm::LlmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("embedder returned a zero vector for text {0:?}")]
    ZeroEmbedding(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed (artifacts in {}): {source}", dir.display())]
    Stage {
        stage: String,
        dir: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Whether the error stems from configuration rather than from running.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Usage(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

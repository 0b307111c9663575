use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("network error: {0}")]
    Network(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed for episode {episode}: {source}")]
    Stage {
        stage: &'static str,
        episode: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str, episode: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            episode: episode.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by the environment (filesystem, network)
    /// rather than by the data.
    pub fn is_environmental(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Network(_) => true,
            Error::Stage { source, .. } => source.is_environmental(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

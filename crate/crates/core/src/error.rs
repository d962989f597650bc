use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown input format `{0}` (supported: json_lines)")]
    UnknownFormat(String),

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("token budget of {budget} positions cannot hold {needed} tokens")]
    Budget { budget: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain `{domain}` has {available} eligible items, {requested} requested")]
    PoolTooSmall {
        domain: String,
        requested: usize,
        available: usize,
    },

    #[error("evaluation domains overlap training domains: {0:?}")]
    DomainOverlap(Vec<String>),

    #[error("protocol mismatch: {0}")]
    ProtocolMismatch(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes used for process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    Data,
    Numeric,
    Other,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> FailureClass {
        match self {
            Error::Config(_) | Error::UnknownFormat(_) | Error::InvalidSpec(_) => {
                FailureClass::Config
            }
            Error::Ingest { .. }
            | Error::Corpus(_)
            | Error::Pipeline(_)
            | Error::PoolTooSmall { .. }
            | Error::DomainOverlap(_)
            | Error::Budget { .. }
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Checkpoint(_) => FailureClass::Data,
            Error::NonFinite(_) | Error::Shape(_) => FailureClass::Numeric,
            Error::ProtocolMismatch(_) => FailureClass::Other,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            FailureClass::Config => 2,
            FailureClass::Data => 3,
            FailureClass::Numeric => 4,
            FailureClass::Other => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid hyperedge: {0}")]
    InvalidHyperedge(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate feature row {row}: zero variance")]
    DegenerateFeature { row: usize },

    #[error("instance exceeds capacity: {0}")]
    Capacity(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid walk path: {0}")]
    Path(String),

    #[error("walk never terminates from states {states:?}")]
    NoTermination { states: Vec<(usize, usize)> },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("missing forward cache")]
    State,

    #[error("all {0} sampled walks were truncated")]
    SamplingFailure(usize),

    #[error("training diverged at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("manifest error for subject {subject}: {reason}")]
    Manifest { subject: String, reason: String },

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow(_) | Error::Divergence { .. } | Error::SamplingFailure(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

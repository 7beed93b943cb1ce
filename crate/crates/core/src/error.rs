use thiserror::Error;

use crate::clmetrics::MetricsError;
use crate::corpus::CorpusError;
use crate::genclient::GenError;
use crate::scorer::AggregateError;
use crate::transform::StatsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing input {path}: {message}")]
    MissingInput { path: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Schema(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error("{failed} of {total} generations failed; first: {first}")]
    Batch {
        failed: usize,
        total: usize,
        first: String,
    },
}

/// Process exit codes, one per failure family.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MISSING_INPUT: i32 = 3;
    pub const SCHEMA: i32 = 4;
    pub const ENDPOINT: i32 = 5;
    pub const METRICS: i32 = 6;
}

impl HarnessError {
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        let path = path.display().to_string();
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::MissingInput {
                path,
                message: e.to_string(),
            }
        } else {
            HarnessError::Io {
                path,
                message: e.to_string(),
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::MissingInput { .. } => exit::MISSING_INPUT,
            HarnessError::Corpus(CorpusError::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                exit::MISSING_INPUT
            }
            HarnessError::Generation(GenError::Import { line: 0, .. }) => exit::MISSING_INPUT,
            HarnessError::Io { .. } => exit::OTHER,
            HarnessError::Schema(_)
            | HarnessError::Corpus(_)
            | HarnessError::Generation(GenError::Import { .. } | GenError::Stale { .. }) => {
                exit::SCHEMA
            }
            HarnessError::Generation(_) | HarnessError::Batch { .. } => exit::ENDPOINT,
            HarnessError::Metrics(_) | HarnessError::Aggregate(_) => exit::METRICS,
            HarnessError::Stats(_) => exit::OTHER,
        }
    }
}

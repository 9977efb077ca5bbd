//! File schemas, score backends and end-to-end run orchestration.

pub mod instances;
pub mod jsonl;
pub mod manifest;
pub mod pipeline;
pub mod remote;
pub mod scores;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {count} invalid line(s), first at line {first_line}: {first_reason}")]
    Invalid {
        path: PathBuf,
        count: usize,
        first_line: usize,
        first_reason: String,
    },
    #[error("{path}:{line}: duplicate id {id}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{0}")]
    Serialize(#[from] serde_json::Error),
}

impl IoError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::File {
            path: path.into(),
            source,
        }
    }
}

/// How ingestion treats bad lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ingestion {
    /// Any bad line fails the load.
    #[default]
    Strict,
    /// Bad lines are reported and skipped.
    Lenient,
}

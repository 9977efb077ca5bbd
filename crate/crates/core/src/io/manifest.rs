//! Run manifests: everything an output depends on, recorded alongside it.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::AuditThresholds;
use crate::confidence::ConfidenceAggregator;
use crate::decision::AggregationMode;

use super::{Ingestion, IoError};

pub const DEFAULT_MAX_EVIDENCE: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
}

impl DatasetRef {
    pub fn of_file(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub dataset: DatasetRef,
    pub thresholds: AuditThresholds,
    pub confidence: ConfidenceAggregator,
    pub mode: AggregationMode,
    pub tau: f64,
    pub scorer: String,
    /// Question-answering evidence is cut to this many sentences.
    pub max_evidence: usize,
    pub ingestion: Ingestion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunManifest {
    /// Hex SHA-256 of the manifest's JSON form; identifies the run in outputs.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub fn file_sha256(path: &Path) -> Result<String, IoError> {
    let mut file = File::open(path).map_err(|e| IoError::file(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| IoError::file(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn tool_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

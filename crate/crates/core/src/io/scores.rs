//! Pair score files and the precomputed-score backend.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::{ProbTriple, Scorer, ScorerError, ScoringPair};

use super::IoError;

/// One scored (condition, evidence) pair. Both indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub instance_id: String,
    pub condition_index: u32,
    pub evidence_index: usize,
    pub p_entail: f64,
    pub p_contradict: f64,
    pub p_neutral: f64,
}

impl ScoreRecord {
    pub fn to_triple(&self) -> Result<ProbTriple, ScorerError> {
        ProbTriple::new(self.p_entail, self.p_contradict, self.p_neutral)
    }
}

type PairKey = (String, u32, usize);

/// Scores looked up by `(instance_id, condition_index, evidence_index)`.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedScores {
    scores: HashMap<PairKey, ProbTriple>,
    source: String,
}

impl PrecomputedScores {
    pub fn from_records(
        records: impl IntoIterator<Item = ScoreRecord>,
        source: impl Into<String>,
    ) -> Result<Self, ScorerError> {
        let mut scores = HashMap::new();
        for r in records {
            let triple = r.to_triple().map_err(|e| {
                ScorerError::MalformedProbability(format!(
                    "{}/{}/{}: {e}",
                    r.instance_id, r.condition_index, r.evidence_index
                ))
            })?;
            let key = (r.instance_id, r.condition_index, r.evidence_index);
            if scores.insert(key.clone(), triple).is_some() {
                return Err(ScorerError::Protocol(format!(
                    "duplicate score for instance {}, condition {}, evidence {}",
                    key.0, key.1, key.2
                )));
            }
        }
        Ok(Self {
            scores,
            source: source.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, LoadScoresError> {
        let records: Vec<ScoreRecord> = super::jsonl::read_all(path)?;
        Ok(Self::from_records(records, path.display().to_string())?)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadScoresError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scores(#[from] ScorerError),
}

impl Scorer for PrecomputedScores {
    fn score_pairs(&self, pairs: &[ScoringPair<'_>]) -> Result<Vec<ProbTriple>, ScorerError> {
        pairs
            .iter()
            .map(|p| {
                self.scores
                    .get(&(p.instance_id.to_string(), p.condition_index, p.evidence_index))
                    .copied()
                    .ok_or_else(|| ScorerError::MissingPrecomputedScore {
                        instance_id: p.instance_id.to_string(),
                        condition_index: p.condition_index,
                        evidence_index: p.evidence_index,
                    })
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("precomputed_file({})", self.source)
    }
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), IoError> {
    super::jsonl::write_all(path, records)
}

//! Condition auditing: reduce per-pair NLI probabilities to the strongest
//! entailment and contradiction evidence, then assign a discrete status
//! with contradiction taking priority.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AuditStatus, Condition, ConditionAudit, EvidenceScores, Instance};

/// Allowed deviation of `entail + contradict + neutral` from 1.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error("no precomputed score for instance {instance_id}, condition {condition_index}, evidence {evidence_index}")]
    MissingPrecomputedScore {
        instance_id: String,
        condition_index: u32,
        evidence_index: usize,
    },
    #[error("malformed probability triple: {0}")]
    MalformedProbability(String),
    #[error("scorer protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditError {
    #[error("instance {instance_id}, condition {condition_index}: {source}")]
    Condition {
        instance_id: String,
        condition_index: u32,
        #[source]
        source: ScorerError,
    },
    #[error("theta_{which} = {value} must lie strictly inside (0, 1)")]
    InvalidThreshold { which: &'static str, value: f64 },
}

/// Entailment and contradiction cut-offs, fixed for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct AuditThresholds {
    theta_ent: f64,
    theta_con: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    theta_ent: f64,
    theta_con: f64,
}

impl TryFrom<RawThresholds> for AuditThresholds {
    type Error = AuditError;

    fn try_from(raw: RawThresholds) -> Result<Self, Self::Error> {
        AuditThresholds::new(raw.theta_ent, raw.theta_con)
    }
}

impl AuditThresholds {
    pub const DEFAULT_THETA: f64 = 0.7;

    pub fn new(theta_ent: f64, theta_con: f64) -> Result<Self, AuditError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(theta_ent) {
            return Err(AuditError::InvalidThreshold {
                which: "ent",
                value: theta_ent,
            });
        }
        if !open_unit(theta_con) {
            return Err(AuditError::InvalidThreshold {
                which: "con",
                value: theta_con,
            });
        }
        Ok(Self {
            theta_ent,
            theta_con,
        })
    }

    pub fn theta_ent(&self) -> f64 {
        self.theta_ent
    }

    pub fn theta_con(&self) -> f64 {
        self.theta_con
    }
}

impl Default for AuditThresholds {
    fn default() -> Self {
        Self {
            theta_ent: Self::DEFAULT_THETA,
            theta_con: Self::DEFAULT_THETA,
        }
    }
}

/// NLI output for one (condition, evidence) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbTriple {
    pub entail: f64,
    pub contradict: f64,
    pub neutral: f64,
}

impl ProbTriple {
    /// Validates component ranges and the sum. The triple is never renormalized.
    pub fn new(entail: f64, contradict: f64, neutral: f64) -> Result<Self, ScorerError> {
        let t = Self {
            entail,
            contradict,
            neutral,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        for (name, v) in [
            ("entail", self.entail),
            ("contradict", self.contradict),
            ("neutral", self.neutral),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ScorerError::MalformedProbability(format!(
                    "{name} = {v} is outside [0, 1]"
                )));
            }
        }
        let sum = self.entail + self.contradict + self.neutral;
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(ScorerError::MalformedProbability(format!(
                "components sum to {sum}"
            )));
        }
        Ok(())
    }
}

/// A (condition, evidence) pair submitted to a scorer. Indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringPair<'a> {
    pub instance_id: &'a str,
    pub condition_index: u32,
    pub evidence_index: usize,
    /// Hypothesis side of the NLI pair.
    pub condition: &'a str,
    /// Premise side of the NLI pair.
    pub evidence: &'a str,
}

/// Source of NLI probabilities.
///
/// Implementations must return exactly one triple per pair, in order.
pub trait Scorer: Send + Sync {
    fn score_pairs(&self, pairs: &[ScoringPair<'_>]) -> Result<Vec<ProbTriple>, ScorerError>;

    /// Short description recorded in run manifests.
    fn describe(&self) -> String;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score_pairs(&self, pairs: &[ScoringPair<'_>]) -> Result<Vec<ProbTriple>, ScorerError> {
        (**self).score_pairs(pairs)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score_pairs(&self, pairs: &[ScoringPair<'_>]) -> Result<Vec<ProbTriple>, ScorerError> {
        (**self).score_pairs(pairs)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Returns the same triple for every pair.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer {
    triple: ProbTriple,
}

impl ConstantScorer {
    pub fn new(triple: ProbTriple) -> Result<Self, ScorerError> {
        triple.validate()?;
        Ok(Self { triple })
    }
}

impl Scorer for ConstantScorer {
    fn score_pairs(&self, pairs: &[ScoringPair<'_>]) -> Result<Vec<ProbTriple>, ScorerError> {
        Ok(vec![self.triple; pairs.len()])
    }

    fn describe(&self) -> String {
        format!(
            "constant(entail={}, contradict={}, neutral={})",
            self.triple.entail, self.triple.contradict, self.triple.neutral
        )
    }
}

/// Independent maxima of entailment and contradiction over the evidence.
/// Ties keep the first sentence; no evidence gives `(0, 0)`.
pub fn reduce_scores(triples: &[ProbTriple]) -> EvidenceScores {
    let argmax = |get: fn(&ProbTriple) -> f64| {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in triples.iter().enumerate() {
            let v = get(t);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        best
    };
    match (argmax(|t| t.entail), argmax(|t| t.contradict)) {
        (Some((je, se)), Some((jc, sc))) => EvidenceScores::new(se, sc, Some(je + 1), Some(jc + 1))
            .expect("validated triples yield scores in [0, 1]"),
        _ => EvidenceScores::empty(),
    }
}

/// Scores one condition against every evidence sentence (`n` scorer pairs).
pub fn score_condition(
    instance_id: &str,
    condition: &Condition,
    evidence: &[String],
    scorer: &dyn Scorer,
) -> Result<EvidenceScores, AuditError> {
    let annotate = |source| AuditError::Condition {
        instance_id: instance_id.to_string(),
        condition_index: condition.index,
        source,
    };
    if evidence.is_empty() {
        return Ok(EvidenceScores::empty());
    }
    let pairs: Vec<ScoringPair<'_>> = evidence
        .iter()
        .enumerate()
        .map(|(j, e)| ScoringPair {
            instance_id,
            condition_index: condition.index,
            evidence_index: j + 1,
            condition: &condition.text,
            evidence: e,
        })
        .collect();
    let triples = scorer.score_pairs(&pairs).map_err(annotate)?;
    if triples.len() != pairs.len() {
        return Err(annotate(ScorerError::Protocol(format!(
            "expected {} triples, got {}",
            pairs.len(),
            triples.len()
        ))));
    }
    for t in &triples {
        t.validate().map_err(annotate)?;
    }
    Ok(reduce_scores(&triples))
}

/// Contradiction first, then support, otherwise missing.
pub fn assign_status(scores: &EvidenceScores, thresholds: &AuditThresholds) -> AuditStatus {
    if scores.s_con() >= thresholds.theta_con {
        AuditStatus::Contradicted
    } else if scores.s_ent() >= thresholds.theta_ent {
        AuditStatus::Supported
    } else {
        AuditStatus::Missing
    }
}

/// Audits every condition of an instance, in condition order.
///
/// The scorer sees exactly `k * n` pairs, condition-major.
pub fn audit_instance(
    instance: &Instance,
    scorer: &dyn Scorer,
    thresholds: &AuditThresholds,
) -> Result<Vec<ConditionAudit>, AuditError> {
    instance
        .conditions()
        .iter()
        .map(|c| {
            let scores = score_condition(instance.id(), c, instance.evidence(), scorer)?;
            let status = assign_status(&scores, thresholds);
            Ok(ConditionAudit::new(c.clone(), scores, status))
        })
        .collect()
}

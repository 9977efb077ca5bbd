//! Instance-level confidence from critical-condition margins, and the
//! threshold rule that decides whether to answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConditionAudit, Label};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfidenceError {
    #[error("no critical condition among the audits")]
    NoCriticalCondition,
    #[error("{field} = {value} is outside [0, 1]")]
    OutOfRange { field: &'static str, value: f64 },
}

/// How critical-condition margins are folded into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceAggregator {
    /// Strongest single signal.
    #[default]
    Max,
    /// Weakest link.
    Min,
    Mean,
}

impl ConfidenceAggregator {
    pub fn apply(self, audits: &[ConditionAudit]) -> Result<f64, ConfidenceError> {
        match self {
            ConfidenceAggregator::Max => confidence_max(audits),
            ConfidenceAggregator::Min => confidence_min(audits),
            ConfidenceAggregator::Mean => confidence_mean(audits),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceAggregator::Max => "max",
            ConfidenceAggregator::Min => "min",
            ConfidenceAggregator::Mean => "mean",
        }
    }
}

fn critical_abs_margins(audits: &[ConditionAudit]) -> Result<Vec<f64>, ConfidenceError> {
    let margins: Vec<f64> = audits
        .iter()
        .filter(|a| a.critical())
        .map(|a| a.margin().abs())
        .collect();
    if margins.is_empty() {
        Err(ConfidenceError::NoCriticalCondition)
    } else {
        Ok(margins)
    }
}

pub fn confidence_max(audits: &[ConditionAudit]) -> Result<f64, ConfidenceError> {
    Ok(critical_abs_margins(audits)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn confidence_min(audits: &[ConditionAudit]) -> Result<f64, ConfidenceError> {
    Ok(critical_abs_margins(audits)?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

pub fn confidence_mean(audits: &[ConditionAudit]) -> Result<f64, ConfidenceError> {
    let m = critical_abs_margins(audits)?;
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    // rounding can push the mean a hair past the extremes
    let (lo, hi) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(mean.clamp(lo, hi))
}

/// Label plus the answer/abstain decision at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub label: Label,
    pub confidence: f64,
    pub tau: f64,
    pub abstained: bool,
}

/// Answers iff `conf >= tau`. The label is kept either way.
pub fn apply_abstention(label: Label, conf: f64, tau: f64) -> Result<Decision, ConfidenceError> {
    for (field, value) in [("confidence", conf), ("tau", tau)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(ConfidenceError::OutOfRange { field, value });
        }
    }
    Ok(Decision {
        label,
        confidence: conf,
        tau,
        abstained: conf < tau,
    })
}

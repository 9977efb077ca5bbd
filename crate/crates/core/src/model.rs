//! Shared domain types: instances, conditions, audit outcomes, predictions
//! and risk-coverage operating points.
//!
//! Everything here is an immutable value once constructed. Constructors
//! enforce the invariants; fields are only reachable through accessors
//! where a mutable field could break one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("instance {id}: no condition is marked critical")]
    NoCriticalCondition { id: String },
    #[error("instance {id}: condition list is empty")]
    EmptyConditions { id: String },
    #[error("instance {id}: duplicate condition index {index}")]
    DuplicateConditionIndex { id: String, index: u32 },
    #[error("instance {id}: condition indices must be contiguous from 1, got {indices:?}")]
    NonContiguousConditionIndex { id: String, indices: Vec<u32> },
    #[error("instance {id}: condition {index} has empty text")]
    EmptyConditionText { id: String, index: u32 },
    #[error("instance {id}: evidence sentence {index} is empty")]
    EmptyEvidence { id: String, index: usize },
    #[error("instance {id}: label {label} does not belong to task {task}")]
    LabelTaskMismatch { id: String, label: Label, task: Task },
    #[error("instance id is empty")]
    EmptyId,
    #[error("{field} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ClaimVerification,
    QuestionAnswering,
}

impl Task {
    /// The non-committal label a task falls back to when evidence is insufficient.
    pub fn epistemic_label(self) -> Label {
        match self {
            Task::ClaimVerification => Label::Claim(ClaimLabel::Nei),
            Task::QuestionAnswering => Label::Qa(QaLabel::Maybe),
        }
    }

    pub fn labels(self) -> &'static [Label] {
        const CLAIM: [Label; 3] = [
            Label::Claim(ClaimLabel::Supports),
            Label::Claim(ClaimLabel::Refutes),
            Label::Claim(ClaimLabel::Nei),
        ];
        const QA: [Label; 3] = [
            Label::Qa(QaLabel::Yes),
            Label::Qa(QaLabel::No),
            Label::Qa(QaLabel::Maybe),
        ];
        match self {
            Task::ClaimVerification => &CLAIM,
            Task::QuestionAnswering => &QA,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ClaimVerification => "claim_verification",
            Task::QuestionAnswering => "question_answering",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClaimLabel {
    Supports,
    Refutes,
    Nei,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QaLabel {
    Yes,
    No,
    Maybe,
}

/// A task-scoped output label.
///
/// Serialized as the bare dataset string (`"SUPPORTS"`, `"maybe"`, ...).
/// The two label vocabularies are disjoint, so a string identifies its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Claim(ClaimLabel),
    Qa(QaLabel),
}

impl Label {
    pub fn task(self) -> Task {
        match self {
            Label::Claim(_) => Task::ClaimVerification,
            Label::Qa(_) => Task::QuestionAnswering,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Claim(ClaimLabel::Supports) => "SUPPORTS",
            Label::Claim(ClaimLabel::Refutes) => "REFUTES",
            Label::Claim(ClaimLabel::Nei) => "NEI",
            Label::Qa(QaLabel::Yes) => "yes",
            Label::Qa(QaLabel::No) => "no",
            Label::Qa(QaLabel::Maybe) => "maybe",
        }
    }

    pub fn is_epistemic(self) -> bool {
        self == self.task().epistemic_label()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "SUPPORTS" => Label::Claim(ClaimLabel::Supports),
            "REFUTES" => Label::Claim(ClaimLabel::Refutes),
            "NEI" => Label::Claim(ClaimLabel::Nei),
            "yes" => Label::Qa(QaLabel::Yes),
            "no" => Label::Qa(QaLabel::No),
            "maybe" => Label::Qa(QaLabel::Maybe),
            other => return Err(ValidationError::UnknownLabel(other.to_string())),
        })
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One decomposed condition. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub index: u32,
    pub text: String,
    pub critical: bool,
}

/// Instance record as decoded from the ingestion schema, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    pub task: Task,
    pub text: String,
    #[serde(default)]
    pub evidence: Vec<String>,
    pub conditions: Vec<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
}

/// A validated claim or question with its evidence and decomposed conditions.
///
/// Conditions are stored sorted by index; at least one is critical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct Instance {
    id: String,
    task: Task,
    text: String,
    evidence: Vec<String>,
    conditions: Vec<Condition>,
    gold_label: Option<Label>,
}

impl Instance {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn evidence(&self) -> &[String] {
        &self.evidence
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn gold_label(&self) -> Option<Label> {
        self.gold_label
    }

    pub fn critical_conditions(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| c.critical)
    }

    /// Keeps at most `max` evidence sentences.
    pub fn with_evidence_limit(&self, max: usize) -> Instance {
        Instance {
            evidence: self.evidence.iter().take(max).cloned().collect(),
            ..self.clone()
        }
    }

    /// Replaces the decomposition with one critical condition holding the
    /// whole input text.
    pub fn undecomposed(&self) -> Instance {
        Instance {
            conditions: vec![Condition {
                index: 1,
                text: self.text.clone(),
                critical: true,
            }],
            ..self.clone()
        }
    }
}

impl TryFrom<RawInstance> for Instance {
    type Error = ValidationError;

    fn try_from(raw: RawInstance) -> Result<Self, Self::Error> {
        validate_instance(raw)
    }
}

impl From<Instance> for RawInstance {
    fn from(inst: Instance) -> Self {
        RawInstance {
            id: inst.id,
            task: inst.task,
            text: inst.text,
            evidence: inst.evidence,
            conditions: inst.conditions,
            gold_label: inst.gold_label,
        }
    }
}

/// Checks a decoded record against the instance invariants.
pub fn validate_instance(raw: RawInstance) -> Result<Instance, ValidationError> {
    let id = raw.id;
    if id.is_empty() {
        return Err(ValidationError::EmptyId);
    }
    if raw.conditions.is_empty() {
        return Err(ValidationError::EmptyConditions { id });
    }

    let mut seen = BTreeSet::new();
    for c in &raw.conditions {
        if !seen.insert(c.index) {
            return Err(ValidationError::DuplicateConditionIndex { id, index: c.index });
        }
    }
    let k = raw.conditions.len() as u32;
    if seen.first() != Some(&1) || seen.last() != Some(&k) {
        return Err(ValidationError::NonContiguousConditionIndex {
            id,
            indices: seen.into_iter().collect(),
        });
    }
    if let Some(c) = raw.conditions.iter().find(|c| c.text.trim().is_empty()) {
        return Err(ValidationError::EmptyConditionText { id, index: c.index });
    }
    if !raw.conditions.iter().any(|c| c.critical) {
        return Err(ValidationError::NoCriticalCondition { id });
    }
    if let Some(j) = raw.evidence.iter().position(|e| e.trim().is_empty()) {
        return Err(ValidationError::EmptyEvidence { id, index: j + 1 });
    }
    if let Some(label) = raw.gold_label {
        if label.task() != raw.task {
            return Err(ValidationError::LabelTaskMismatch {
                id,
                label,
                task: raw.task,
            });
        }
    }

    let mut conditions = raw.conditions;
    conditions.sort_by_key(|c| c.index);
    Ok(Instance {
        id,
        task: raw.task,
        text: raw.text,
        evidence: raw.evidence,
        conditions,
        gold_label: raw.gold_label,
    })
}

fn check_unit(field: &'static str, value: f64) -> Result<f64, ValidationError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ValidationError::OutOfRange {
            field,
            value,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

/// Strongest entailment and contradiction evidence for one condition.
///
/// Argmax positions are 1-based evidence indices; both are absent when the
/// evidence set was empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceScores {
    s_ent: f64,
    s_con: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ent_argmax: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    con_argmax: Option<usize>,
}

impl EvidenceScores {
    pub fn new(
        s_ent: f64,
        s_con: f64,
        ent_argmax: Option<usize>,
        con_argmax: Option<usize>,
    ) -> Result<Self, ValidationError> {
        Ok(Self {
            s_ent: check_unit("s_ent", s_ent)?,
            s_con: check_unit("s_con", s_con)?,
            ent_argmax,
            con_argmax,
        })
    }

    /// Scores for a condition audited against no evidence at all.
    pub fn empty() -> Self {
        Self {
            s_ent: 0.0,
            s_con: 0.0,
            ent_argmax: None,
            con_argmax: None,
        }
    }

    pub fn s_ent(&self) -> f64 {
        self.s_ent
    }

    pub fn s_con(&self) -> f64 {
        self.s_con
    }

    pub fn ent_argmax(&self) -> Option<usize> {
        self.ent_argmax
    }

    pub fn con_argmax(&self) -> Option<usize> {
        self.con_argmax
    }

    pub fn margin(&self) -> f64 {
        self.s_ent - self.s_con
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditStatus {
    #[serde(rename = "SUP")]
    Supported,
    #[serde(rename = "CON")]
    Contradicted,
    #[serde(rename = "MIS")]
    Missing,
}

impl AuditStatus {
    pub const ALL: [AuditStatus; 3] = [
        AuditStatus::Supported,
        AuditStatus::Contradicted,
        AuditStatus::Missing,
    ];
}

impl fmt::Display for AuditStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditStatus::Supported => "SUP",
            AuditStatus::Contradicted => "CON",
            AuditStatus::Missing => "MIS",
        })
    }
}

/// Audit outcome for one condition. The margin is always `s_ent - s_con`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAudit {
    condition: Condition,
    scores: EvidenceScores,
    status: AuditStatus,
    margin: f64,
}

impl ConditionAudit {
    pub fn new(condition: Condition, scores: EvidenceScores, status: AuditStatus) -> Self {
        Self {
            margin: scores.margin(),
            condition,
            scores,
            status,
        }
    }

    pub fn condition(&self) -> &Condition {
        &self.condition
    }

    pub fn critical(&self) -> bool {
        self.condition.critical
    }

    pub fn scores(&self) -> &EvidenceScores {
        &self.scores
    }

    pub fn status(&self) -> AuditStatus {
        self.status
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// Aggregated output for one instance. Abstained predictions keep their
/// label so thresholds can be swept after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub label: Label,
    pub confidence: f64,
    pub tau: f64,
    pub abstained: bool,
    pub audits: Vec<ConditionAudit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("loss ordering requires loss_fs > loss_fr > 0 (got fs = {loss_fs}, fr = {loss_fr})")]
pub struct InvalidLoss {
    pub loss_fs: f64,
    pub loss_fr: f64,
}

/// Asymmetric error costs: a false support costs more than a false refutation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSpec {
    loss_fs: f64,
    loss_fr: f64,
}

impl LossSpec {
    pub fn new(loss_fs: f64, loss_fr: f64) -> Result<Self, InvalidLoss> {
        if loss_fr.is_finite() && loss_fs.is_finite() && loss_fr > 0.0 && loss_fs > loss_fr {
            Ok(Self { loss_fs, loss_fr })
        } else {
            Err(InvalidLoss { loss_fs, loss_fr })
        }
    }

    pub fn loss_fs(&self) -> f64 {
        self.loss_fs
    }

    pub fn loss_fr(&self) -> f64 {
        self.loss_fr
    }

    pub fn loss_abstain(&self) -> f64 {
        0.0
    }
}

/// One operating point of a threshold sweep.
///
/// `risk` is `None` exactly when nothing is selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcPoint {
    pub tau: f64,
    pub coverage: f64,
    pub risk: Option<f64>,
    pub n_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CurveError {
    #[error("curve has no points")]
    Empty,
    #[error("curve point at tau {0} has undefined risk")]
    UndefinedRisk(String),
}

/// Operating points with defined risk, sorted by coverage ascending and
/// then by threshold descending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcCurve {
    points: Vec<RcPoint>,
}

impl RcCurve {
    pub fn new(mut points: Vec<RcPoint>) -> Result<Self, CurveError> {
        if points.is_empty() {
            return Err(CurveError::Empty);
        }
        if let Some(p) = points.iter().find(|p| p.risk.is_none()) {
            return Err(CurveError::UndefinedRisk(p.tau.to_string()));
        }
        points.sort_by(|a, b| {
            a.coverage
                .total_cmp(&b.coverage)
                .then(b.tau.total_cmp(&a.tau))
        });
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RcPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(coverage, risk)` pairs in curve order.
    pub fn coverage_risk(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points
            .iter()
            .map(|p| (p.coverage, p.risk.expect("curve points carry risk")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(index: u32, critical: bool) -> Condition {
        Condition {
            index,
            text: format!("condition {index}"),
            critical,
        }
    }

    fn raw(conditions: Vec<Condition>) -> RawInstance {
        RawInstance {
            id: "c1".into(),
            task: Task::ClaimVerification,
            text: "A reduces B".into(),
            evidence: vec!["A reduced B in mice.".into()],
            conditions,
            gold_label: None,
        }
    }

    #[test]
    fn one_critical_of_two_is_valid() {
        let inst = validate_instance(raw(vec![cond(1, true), cond(2, false)])).unwrap();
        assert_eq!(inst.conditions().len(), 2);
        assert_eq!(inst.critical_conditions().count(), 1);
    }

    #[test]
    fn no_critical_condition_rejected() {
        let err = validate_instance(raw(vec![cond(1, false), cond(2, false)])).unwrap_err();
        assert!(matches!(err, ValidationError::NoCriticalCondition { .. }));
    }

    #[test]
    fn qa_task_rejects_claim_label() {
        let mut r = raw(vec![cond(1, true)]);
        r.task = Task::QuestionAnswering;
        r.gold_label = Some(Label::Claim(ClaimLabel::Supports));
        let err = validate_instance(r).unwrap_err();
        assert!(matches!(err, ValidationError::LabelTaskMismatch { .. }));
    }

    #[test]
    fn empty_and_duplicate_conditions_rejected() {
        assert!(matches!(
            validate_instance(raw(vec![])).unwrap_err(),
            ValidationError::EmptyConditions { .. }
        ));
        assert!(matches!(
            validate_instance(raw(vec![cond(1, true), cond(1, false)])).unwrap_err(),
            ValidationError::DuplicateConditionIndex { index: 1, .. }
        ));
        assert!(matches!(
            validate_instance(raw(vec![cond(1, true), cond(3, false)])).unwrap_err(),
            ValidationError::NonContiguousConditionIndex { .. }
        ));
    }

    #[test]
    fn empty_evidence_sentence_rejected() {
        let mut r = raw(vec![cond(1, true)]);
        r.evidence.push("  ".into());
        assert!(matches!(
            validate_instance(r).unwrap_err(),
            ValidationError::EmptyEvidence { index: 2, .. }
        ));
    }

    #[test]
    fn conditions_are_sorted_by_index() {
        let inst = validate_instance(raw(vec![cond(2, false), cond(1, true)])).unwrap();
        let idx: Vec<u32> = inst.conditions().iter().map(|c| c.index).collect();
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn label_strings_identify_task() {
        for task in [Task::ClaimVerification, Task::QuestionAnswering] {
            for &label in task.labels() {
                let parsed: Label = label.as_str().parse().unwrap();
                assert_eq!(parsed, label);
                assert_eq!(parsed.task(), task);
            }
        }
        assert!("Supports".parse::<Label>().is_err());
    }

    #[test]
    fn deserializing_invalid_instance_fails() {
        let json = r#"{"id":"x","task":"claim_verification","text":"t","evidence":[],
            "conditions":[{"index":1,"text":"c","critical":false}]}"#;
        let err = serde_json::from_str::<Instance>(json).unwrap_err();
        assert!(err.to_string().contains("critical"));
    }

    #[test]
    fn scores_out_of_range_rejected() {
        assert!(EvidenceScores::new(1.2, 0.0, None, None).is_err());
        assert!(EvidenceScores::new(0.5, -0.1, None, None).is_err());
        assert!(EvidenceScores::new(f64::NAN, 0.0, None, None).is_err());
    }

    #[test]
    fn loss_ordering() {
        assert!(LossSpec::new(2.0, 1.0).is_ok());
        assert!(LossSpec::new(1.0, 1.0).is_err());
        assert!(LossSpec::new(1.0, 2.0).is_err());
        assert!(LossSpec::new(1.0, 0.0).is_err());
        assert_eq!(LossSpec::new(3.0, 2.0).unwrap().loss_abstain(), 0.0);
    }

    #[test]
    fn curve_sorts_by_coverage_then_tau_descending() {
        let p = |tau, coverage| RcPoint {
            tau,
            coverage,
            risk: Some(0.1),
            n_selected: 1,
        };
        let curve = RcCurve::new(vec![p(0.0, 1.0), p(0.9, 0.25), p(0.3, 1.0)]).unwrap();
        let taus: Vec<f64> = curve.points().iter().map(|p| p.tau).collect();
        assert_eq!(taus, vec![0.9, 0.3, 0.0]);
    }

    #[test]
    fn curve_rejects_undefined_risk() {
        let p = RcPoint {
            tau: 1.0,
            coverage: 0.0,
            risk: None,
            n_selected: 0,
        };
        assert_eq!(
            RcCurve::new(vec![p]).unwrap_err(),
            CurveError::UndefinedRisk("1".into())
        );
        assert_eq!(RcCurve::new(vec![]).unwrap_err(), CurveError::Empty);
    }
}

//! Rule-based aggregation of condition audits into task labels, plus the
//! naive-Bayes view used to check that the rules err on the safe side.
//!
//! Only critical conditions take part. One contradicted critical condition
//! is enough to reject; support needs every critical condition (claims) or
//! at least one (questions) with no contradiction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{apply_abstention, ConfidenceAggregator, ConfidenceError};
use crate::model::{
    AuditStatus, ClaimLabel, ConditionAudit, Instance, InvalidLoss, Label, LossSpec, Prediction,
    QaLabel,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecisionError {
    #[error("no critical condition among the audits")]
    NoCriticalCondition,
    #[error("mode {mode:?} requires a single condition, instance {instance_id} has {k}")]
    ModeInstanceMismatch {
        mode: AggregationMode,
        instance_id: String,
        k: usize,
    },
    #[error("audits do not match the conditions of instance {0}")]
    AuditMismatch(String),
    #[error(transparent)]
    InvalidLoss(#[from] InvalidLoss),
    #[error("{what} must be positive and finite, got {value}")]
    NonPositiveInput { what: &'static str, value: f64 },
    #[error(transparent)]
    Confidence(ConfidenceError),
}

impl From<ConfidenceError> for DecisionError {
    fn from(e: ConfidenceError) -> Self {
        match e {
            ConfidenceError::NoCriticalCondition => DecisionError::NoCriticalCondition,
            other => DecisionError::Confidence(other),
        }
    }
}

/// Pipeline variant: the full pipeline or one of the two ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    #[default]
    Full,
    /// Whole input audited as one critical condition.
    NoDecompose,
    /// No evidence checks; every instance gets the epistemic default.
    NoAudit,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Full => "full",
            AggregationMode::NoDecompose => "no-decompose",
            AggregationMode::NoAudit => "no-audit",
        }
    }
}

fn critical_statuses(
    audits: &[ConditionAudit],
) -> Result<impl Iterator<Item = AuditStatus> + Clone + '_, DecisionError> {
    if !audits.iter().any(ConditionAudit::critical) {
        return Err(DecisionError::NoCriticalCondition);
    }
    Ok(audits.iter().filter(|a| a.critical()).map(|a| a.status()))
}

pub fn aggregate_claim(audits: &[ConditionAudit]) -> Result<ClaimLabel, DecisionError> {
    let mut crit = critical_statuses(audits)?;
    Ok(if crit.clone().any(|s| s == AuditStatus::Contradicted) {
        ClaimLabel::Refutes
    } else if crit.all(|s| s == AuditStatus::Supported) {
        ClaimLabel::Supports
    } else {
        ClaimLabel::Nei
    })
}

pub fn aggregate_qa(audits: &[ConditionAudit]) -> Result<QaLabel, DecisionError> {
    let mut crit = critical_statuses(audits)?;
    Ok(if crit.clone().any(|s| s == AuditStatus::Contradicted) {
        QaLabel::No
    } else if crit.any(|s| s == AuditStatus::Supported) {
        QaLabel::Yes
    } else {
        QaLabel::Maybe
    })
}

/// Mode, confidence aggregator and abstention threshold for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub mode: AggregationMode,
    pub confidence: ConfidenceAggregator,
    pub tau: f64,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        Self {
            mode: AggregationMode::Full,
            confidence: ConfidenceAggregator::Max,
            tau: 0.0,
        }
    }
}

/// Aggregates one instance's audits into a label, confidence and abstention flag.
///
/// In `NoDecompose` mode the instance must already be reduced to a single
/// condition (see [`Instance::undecomposed`]). `NoAudit` ignores `audits`.
pub fn predict(
    instance: &Instance,
    audits: &[ConditionAudit],
    policy: &DecisionPolicy,
) -> Result<Prediction, DecisionError> {
    let k = instance.conditions().len();
    if policy.mode == AggregationMode::NoDecompose && k != 1 {
        return Err(DecisionError::ModeInstanceMismatch {
            mode: policy.mode,
            instance_id: instance.id().to_string(),
            k,
        });
    }

    let (label, confidence, audits) = if policy.mode == AggregationMode::NoAudit {
        (instance.task().epistemic_label(), 0.0, Vec::new())
    } else {
        let consistent = audits.len() == k
            && audits
                .iter()
                .zip(instance.conditions())
                .all(|(a, c)| a.condition() == c);
        if !consistent {
            return Err(DecisionError::AuditMismatch(instance.id().to_string()));
        }
        let label = match instance.task() {
            crate::model::Task::ClaimVerification => Label::Claim(aggregate_claim(audits)?),
            crate::model::Task::QuestionAnswering => Label::Qa(aggregate_qa(audits)?),
        };
        (label, policy.confidence.apply(audits)?, audits.to_vec())
    };

    let decision = apply_abstention(label, confidence, policy.tau)?;
    Ok(Prediction {
        instance_id: instance.id().to_string(),
        label: decision.label,
        confidence: decision.confidence,
        tau: decision.tau,
        abstained: decision.abstained,
        audits,
    })
}

/// Posterior odds of support above which predicting support is Bayes-optimal.
pub fn bayes_odds_threshold(loss: &LossSpec) -> f64 {
    loss.loss_fs() / loss.loss_fr()
}

fn positive(what: &'static str, value: f64) -> Result<f64, DecisionError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(DecisionError::NonPositiveInput { what, value })
    }
}

/// Prior odds times the product of per-audit likelihood ratios.
pub fn naive_bayes_posterior_odds(
    prior_odds: f64,
    likelihood_ratios: &[f64],
) -> Result<f64, DecisionError> {
    let mut odds = positive("prior odds", prior_odds)?;
    for &r in likelihood_ratios {
        odds *= positive("likelihood ratio", r)?;
    }
    Ok(odds)
}

/// `P(status | supports) / P(status | refutes)` for each audit status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusRatios {
    pub sup: f64,
    pub con: f64,
    pub mis: f64,
}

impl StatusRatios {
    pub fn uninformative() -> Self {
        Self {
            sup: 1.0,
            con: 1.0,
            mis: 1.0,
        }
    }

    pub fn get(&self, status: AuditStatus) -> f64 {
        match status {
            AuditStatus::Supported => self.sup,
            AuditStatus::Contradicted => self.con,
            AuditStatus::Missing => self.mis,
        }
    }
}

/// Likelihood ratios per (status, criticality) category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatios {
    pub critical: StatusRatios,
    pub non_critical: StatusRatios,
}

impl LikelihoodRatios {
    /// Informative ratios for critical conditions, 1.0 for the rest.
    pub fn critical_only(critical: StatusRatios) -> Self {
        Self {
            critical,
            non_critical: StatusRatios::uninformative(),
        }
    }

    pub fn ratio_for(&self, audit: &ConditionAudit) -> f64 {
        if audit.critical() {
            self.critical.get(audit.status())
        } else {
            self.non_critical.get(audit.status())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BayesAgreement {
    /// Rule and Bayes decision agree on support vs. non-support.
    Agree,
    /// Rule withholds support that the Bayes decision would give.
    Conservative,
    /// Rule supports where the Bayes decision would not.
    AntiConservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rule_label: Label,
    pub posterior_odds: f64,
    pub odds_threshold: f64,
    pub bayes_supports: bool,
    pub agreement: BayesAgreement,
}

/// Compares the claim rule against the Bayes decision on the same audits.
pub fn bayes_consistency_report(
    prior_odds: f64,
    ratios: &LikelihoodRatios,
    loss: &LossSpec,
    audits: &[ConditionAudit],
) -> Result<ConsistencyReport, DecisionError> {
    let rule = aggregate_claim(audits)?;
    let per_audit: Vec<f64> = audits.iter().map(|a| ratios.ratio_for(a)).collect();
    let posterior_odds = naive_bayes_posterior_odds(prior_odds, &per_audit)?;
    let odds_threshold = bayes_odds_threshold(loss);
    let bayes_supports = posterior_odds > odds_threshold;
    let rule_supports = rule == ClaimLabel::Supports;
    let agreement = match (rule_supports, bayes_supports) {
        (true, false) => BayesAgreement::AntiConservative,
        (false, true) => BayesAgreement::Conservative,
        _ => BayesAgreement::Agree,
    };
    Ok(ConsistencyReport {
        rule_label: Label::Claim(rule),
        posterior_odds,
        odds_threshold,
        bayes_supports,
        agreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Condition, EvidenceScores, RawInstance, Task};
    use AuditStatus::{Contradicted as CON, Missing as MIS, Supported as SUP};

    fn audit(index: u32, critical: bool, status: AuditStatus, margin: f64) -> ConditionAudit {
        let (e, c) = if margin >= 0.0 { (margin, 0.0) } else { (0.0, -margin) };
        ConditionAudit::new(
            Condition {
                index,
                text: format!("c{index}"),
                critical,
            },
            EvidenceScores::new(e, c, None, None).unwrap(),
            status,
        )
    }

    fn vector(spec: &[(bool, AuditStatus)]) -> Vec<ConditionAudit> {
        spec.iter()
            .enumerate()
            .map(|(i, &(crit, st))| audit(i as u32 + 1, crit, st, 0.0))
            .collect()
    }

    /// Every (status, criticality) vector of length k with at least one critical entry.
    fn all_vectors(k: usize) -> Vec<Vec<(bool, AuditStatus)>> {
        let mut out = Vec::new();
        for code in 0..3usize.pow(k as u32) {
            for mask in 1..(1u32 << k) {
                let mut c = code;
                let v = (0..k)
                    .map(|i| {
                        let st = AuditStatus::ALL[c % 3];
                        c /= 3;
                        (mask & (1 << i) != 0, st)
                    })
                    .collect();
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn claim_rule_table() {
        assert_eq!(aggregate_claim(&vector(&[(true, CON), (true, SUP)])).unwrap(), ClaimLabel::Refutes);
        assert_eq!(
            aggregate_claim(&vector(&[(true, SUP), (true, SUP), (false, CON)])).unwrap(),
            ClaimLabel::Supports
        );
        assert_eq!(aggregate_claim(&vector(&[(true, SUP), (true, MIS)])).unwrap(), ClaimLabel::Nei);
    }

    #[test]
    fn qa_rule_table() {
        assert_eq!(aggregate_qa(&vector(&[(true, SUP), (true, CON)])).unwrap(), QaLabel::No);
        assert_eq!(aggregate_qa(&vector(&[(true, SUP), (true, MIS)])).unwrap(), QaLabel::Yes);
        assert_eq!(aggregate_qa(&vector(&[(true, MIS), (true, MIS)])).unwrap(), QaLabel::Maybe);
    }

    #[test]
    fn rules_need_a_critical_audit() {
        let v = vector(&[(false, SUP)]);
        assert_eq!(aggregate_claim(&v), Err(DecisionError::NoCriticalCondition));
        assert_eq!(aggregate_qa(&v), Err(DecisionError::NoCriticalCondition));
    }

    #[test]
    fn exhaustive_rule_properties_up_to_k4() {
        for k in 1..=4 {
            for v in all_vectors(k) {
                let a = vector(&v);
                let claim = aggregate_claim(&a).unwrap();
                let qa = aggregate_qa(&a).unwrap();
                let crit: Vec<AuditStatus> = v.iter().filter(|x| x.0).map(|x| x.1).collect();

                // branch exclusivity
                let refute_branch = crit.contains(&CON);
                let support_branch = crit.iter().all(|&s| s == SUP);
                assert!(!(refute_branch && support_branch));

                // claim support implies qa yes
                if claim == ClaimLabel::Supports {
                    assert_eq!(qa, QaLabel::Yes);
                }

                for i in 0..k {
                    if v[i].0 {
                        let mut flipped = v.clone();
                        flipped[i].1 = CON;
                        let f = vector(&flipped);
                        assert_eq!(aggregate_claim(&f).unwrap(), ClaimLabel::Refutes);
                        assert_eq!(aggregate_qa(&f).unwrap(), QaLabel::No);
                    } else {
                        for st in AuditStatus::ALL {
                            let mut changed = v.clone();
                            changed[i].1 = st;
                            let c = vector(&changed);
                            assert_eq!(aggregate_claim(&c).unwrap(), claim);
                            assert_eq!(aggregate_qa(&c).unwrap(), qa);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn qa_is_strictly_weaker_than_claim() {
        let witness = vector(&[(true, SUP), (true, MIS)]);
        assert_eq!(aggregate_qa(&witness).unwrap(), QaLabel::Yes);
        assert_ne!(aggregate_claim(&witness).unwrap(), ClaimLabel::Supports);
    }

    fn instance(task: Task, k: u32) -> Instance {
        crate::model::validate_instance(RawInstance {
            id: "p".into(),
            task,
            text: "whole claim".into(),
            evidence: vec!["e".into()],
            conditions: (1..=k)
                .map(|i| Condition {
                    index: i,
                    text: format!("c{i}"),
                    critical: true,
                })
                .collect(),
            gold_label: None,
        })
        .unwrap()
    }

    #[test]
    fn full_mode_supports_with_confidence() {
        let inst = instance(Task::ClaimVerification, 2);
        let audits = vec![audit(1, true, SUP, 0.8), audit(2, true, SUP, 0.8)];
        let p = predict(&inst, &audits, &DecisionPolicy::default()).unwrap();
        assert_eq!(p.label, Label::Claim(ClaimLabel::Supports));
        assert_eq!(p.confidence, 0.8);
        assert!(!p.abstained);
        assert_eq!(p.audits.len(), 2);
    }

    #[test]
    fn no_audit_mode_collapses_to_epistemic_default() {
        for (task, expected) in [
            (Task::ClaimVerification, Label::Claim(ClaimLabel::Nei)),
            (Task::QuestionAnswering, Label::Qa(QaLabel::Maybe)),
        ] {
            let inst = instance(task, 3);
            let policy = DecisionPolicy {
                mode: AggregationMode::NoAudit,
                tau: 0.01,
                ..Default::default()
            };
            let p = predict(&inst, &[], &policy).unwrap();
            assert_eq!(p.label, expected);
            assert_eq!(p.confidence, 0.0);
            assert!(p.abstained);
            assert!(p.audits.is_empty());
        }
    }

    #[test]
    fn no_decompose_requires_single_condition() {
        let inst = instance(Task::ClaimVerification, 2);
        let policy = DecisionPolicy {
            mode: AggregationMode::NoDecompose,
            ..Default::default()
        };
        assert!(matches!(
            predict(&inst, &[], &policy),
            Err(DecisionError::ModeInstanceMismatch { k: 2, .. })
        ));

        let single = inst.undecomposed();
        let audits = vec![ConditionAudit::new(
            single.conditions()[0].clone(),
            EvidenceScores::new(0.1, 0.9, None, None).unwrap(),
            CON,
        )];
        let p = predict(&single, &audits, &policy).unwrap();
        assert_eq!(p.label, Label::Claim(ClaimLabel::Refutes));
        assert!((p.confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mismatched_audits_rejected() {
        let inst = instance(Task::ClaimVerification, 2);
        let audits = vec![audit(1, true, SUP, 0.8)];
        assert!(matches!(
            predict(&inst, &audits, &DecisionPolicy::default()),
            Err(DecisionError::AuditMismatch(_))
        ));
    }

    #[test]
    fn odds_threshold_is_loss_ratio() {
        assert_eq!(bayes_odds_threshold(&LossSpec::new(2.0, 1.0).unwrap()), 2.0);
        assert_eq!(bayes_odds_threshold(&LossSpec::new(3.0, 2.0).unwrap()), 1.5);
        assert!(LossSpec::new(1.0, 1.0).is_err());
    }

    #[test]
    fn posterior_odds_product() {
        assert_eq!(naive_bayes_posterior_odds(1.0, &[3.0, 2.0]).unwrap(), 6.0);
        assert_eq!(naive_bayes_posterior_odds(1.0, &[]).unwrap(), 1.0);
        assert_eq!(naive_bayes_posterior_odds(0.5, &[4.0, 0.25]).unwrap(), 0.5);
        assert!(matches!(
            naive_bayes_posterior_odds(1.0, &[2.0, 0.0]),
            Err(DecisionError::NonPositiveInput { .. })
        ));
        assert!(naive_bayes_posterior_odds(-1.0, &[]).is_err());
    }

    fn ratios() -> LikelihoodRatios {
        LikelihoodRatios::critical_only(StatusRatios {
            sup: 3.0,
            con: 0.1,
            mis: 1.0,
        })
    }

    #[test]
    fn consistency_examples() {
        let loss = LossSpec::new(2.0, 1.0).unwrap();

        // odds 9 against threshold 2, rule supports
        let r = bayes_consistency_report(1.0, &ratios(), &loss, &vector(&[(true, SUP), (true, SUP)]))
            .unwrap();
        assert!((r.posterior_odds - 9.0).abs() < 1e-12);
        assert_eq!(r.agreement, BayesAgreement::Agree);

        // odds 0.9, rule refutes
        let r = bayes_consistency_report(
            1.0,
            &ratios(),
            &loss,
            &vector(&[(true, CON), (true, SUP), (true, SUP)]),
        )
        .unwrap();
        assert!((r.posterior_odds - 0.9).abs() < 1e-12);
        assert!(!r.bayes_supports);
        assert_eq!(r.rule_label, Label::Claim(ClaimLabel::Refutes));
        assert_eq!(r.agreement, BayesAgreement::Agree);

        // odds 3 > 2 but one critical is missing: rule says NEI
        let r = bayes_consistency_report(1.0, &ratios(), &loss, &vector(&[(true, MIS), (true, SUP)]))
            .unwrap();
        assert!((r.posterior_odds - 3.0).abs() < 1e-12);
        assert_eq!(r.rule_label, Label::Claim(ClaimLabel::Nei));
        assert_eq!(r.agreement, BayesAgreement::Conservative);
    }

    #[test]
    fn rule_is_never_anti_conservative_up_to_k3() {
        let loss = LossSpec::new(2.0, 1.0).unwrap();
        for k in 1..=3 {
            for v in all_vectors(k) {
                let r = bayes_consistency_report(1.0, &ratios(), &loss, &vector(&v)).unwrap();
                assert_ne!(r.agreement, BayesAgreement::AntiConservative, "{v:?}");
            }
        }
    }
}

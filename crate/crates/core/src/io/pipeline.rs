//! End-to-end runs: score pairs, audit, aggregate, evaluate, write outputs.
//!
//! Instances are processed in parallel; every output is assembled and
//! written in input order, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{audit_instance, AuditThresholds, Scorer, ScoringPair};
use crate::decision::{predict, AggregationMode, DecisionPolicy};
use crate::model::{Instance, Label, Prediction, RcCurve, RcPoint, Task};
use crate::selective::{risk_coverage_at, summarize, EvalError, EvalRecord, MetricSummary};

use super::instances::load_instances;
use super::manifest::{tool_version, DatasetRef, RunManifest, DEFAULT_MAX_EVIDENCE};
use super::scores::ScoreRecord;
use super::{jsonl, Ingestion, IoError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const CURVE_FILE: &str = "rc_curve.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0} instance(s) failed; first: {1}")]
    InstanceFailures(usize, String),
}

/// Applies the mode's input transform and the evidence limit.
pub fn prepare_instance(instance: &Instance, mode: AggregationMode, max_evidence: usize) -> Instance {
    let inst = if instance.task() == Task::QuestionAnswering
        && instance.evidence().len() > max_evidence
    {
        instance.with_evidence_limit(max_evidence)
    } else {
        instance.clone()
    };
    match mode {
        AggregationMode::NoDecompose => inst.undecomposed(),
        _ => inst,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub reason: String,
}

/// Raw pair scores for every instance; the `audit` stage.
pub fn score_instances(
    instances: &[Instance],
    scorer: &dyn Scorer,
) -> (Vec<ScoreRecord>, Vec<InstanceFailure>) {
    let results: Vec<Result<Vec<ScoreRecord>, InstanceFailure>> = instances
        .par_iter()
        .map(|inst| {
            let pairs: Vec<ScoringPair<'_>> = inst
                .conditions()
                .iter()
                .flat_map(|c| {
                    inst.evidence()
                        .iter()
                        .enumerate()
                        .map(move |(j, e)| ScoringPair {
                            instance_id: inst.id(),
                            condition_index: c.index,
                            evidence_index: j + 1,
                            condition: &c.text,
                            evidence: e,
                        })
                })
                .collect();
            let fail = |reason: String| InstanceFailure {
                instance_id: inst.id().to_string(),
                reason,
            };
            let triples = scorer.score_pairs(&pairs).map_err(|e| fail(e.to_string()))?;
            if triples.len() != pairs.len() {
                return Err(fail(format!(
                    "scorer returned {} triples for {} pairs",
                    triples.len(),
                    pairs.len()
                )));
            }
            Ok(pairs
                .iter()
                .zip(triples)
                .map(|(p, t)| ScoreRecord {
                    instance_id: p.instance_id.to_string(),
                    condition_index: p.condition_index,
                    evidence_index: p.evidence_index,
                    p_entail: t.entail,
                    p_contradict: t.contradict,
                    p_neutral: t.neutral,
                })
                .collect())
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => records.extend(v),
            Err(f) => failures.push(f),
        }
    }
    (records, failures)
}

/// A prediction as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Digest of the manifest that produced this record.
    pub run: String,
    pub task: Task,
    pub mode: AggregationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
    #[serde(flatten)]
    pub prediction: Prediction,
}

impl PredictionRecord {
    /// Whether the (possibly abstained) label matches gold.
    pub fn correct(&self) -> Option<bool> {
        self.gold_label.map(|g| g == self.prediction.label)
    }
}

/// Audits and aggregates every instance; the `decide` stage.
///
/// Instances must already be prepared for the policy's mode.
pub fn decide_instances(
    instances: &[Instance],
    scorer: &dyn Scorer,
    thresholds: &AuditThresholds,
    policy: &DecisionPolicy,
) -> (Vec<Prediction>, Vec<InstanceFailure>) {
    let results: Vec<Result<Prediction, InstanceFailure>> = instances
        .par_iter()
        .map(|inst| {
            let fail = |reason: String| InstanceFailure {
                instance_id: inst.id().to_string(),
                reason,
            };
            let audits = if policy.mode == AggregationMode::NoAudit {
                Vec::new()
            } else {
                audit_instance(inst, scorer, thresholds).map_err(|e| fail(e.to_string()))?
            };
            predict(inst, &audits, policy).map_err(|e| fail(e.to_string()))
        })
        .collect();

    let mut predictions = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(p) => predictions.push(p),
            Err(f) => failures.push(f),
        }
    }
    (predictions, failures)
}

/// Evaluation records and `(predicted, gold)` pairs for predictions with gold.
pub fn evaluation_inputs(records: &[PredictionRecord]) -> (Vec<EvalRecord>, Vec<(Label, Label)>) {
    records
        .iter()
        .filter_map(|r| {
            let gold = r.gold_label?;
            Some((
                EvalRecord::new(
                    r.prediction.instance_id.clone(),
                    r.prediction.confidence,
                    gold == r.prediction.label,
                ),
                (r.prediction.label, gold),
            ))
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
    pub n_predictions: usize,
    pub n_evaluated: usize,
    /// Operating point at the run's own threshold.
    pub at_tau: Option<RcPoint>,
    pub metrics: Option<MetricSummary>,
}

/// CSV with columns `tau,coverage,risk,n_selected`.
pub fn curve_csv(curve: &RcCurve) -> String {
    let mut out = String::from("tau,coverage,risk,n_selected\n");
    for p in curve.points() {
        let risk = p.risk.expect("curve points carry risk");
        writeln!(out, "{},{},{},{}", p.tau, p.coverage, risk, p.n_selected).expect("string write");
    }
    out
}

/// Parses a curve CSV written by [`curve_csv`].
pub fn parse_curve_csv(text: &str) -> Result<RcCurve, String> {
    let mut lines = text.lines();
    if lines.next() != Some("tau,coverage,risk,n_selected") {
        return Err("unexpected header".into());
    }
    let points = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(format!("bad row {l:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
            Ok(RcPoint {
                tau: num(f[0])?,
                coverage: num(f[1])?,
                risk: Some(num(f[2])?),
                n_selected: f[3].parse().map_err(|e| format!("{:?}: {e}", f[3]))?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    RcCurve::new(points).map_err(|e| e.to_string())
}

/// Summary and curve for a set of prediction records; the `sweep` stage.
pub fn evaluate_predictions(
    records: &[PredictionRecord],
    tau: f64,
    manifest: Option<RunManifest>,
) -> Result<(RunSummary, Option<RcCurve>), EvalError> {
    let (eval, pairs) = evaluation_inputs(records);
    let (metrics, curve, at_tau) = if eval.is_empty() {
        (None, None, None)
    } else {
        let (m, c) = summarize(&pairs, &eval)?;
        (Some(m), Some(c), Some(risk_coverage_at(&eval, tau)?))
    };
    Ok((
        RunSummary {
            manifest,
            n_predictions: records.len(),
            n_evaluated: eval.len(),
            at_tau,
            metrics,
        },
        curve,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::file(path, e))
}

/// Writes the curve CSV and summary JSON for evaluated predictions.
pub fn write_evaluation(
    out_dir: &Path,
    summary: &RunSummary,
    curve: Option<&RcCurve>,
) -> Result<(), IoError> {
    if let Some(c) = curve {
        let path = out_dir.join(CURVE_FILE);
        fs::write(&path, curve_csv(c)).map_err(|e| IoError::file(&path, e))?;
    }
    write_json(&out_dir.join(SUMMARY_FILE), summary)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub instances: PathBuf,
    pub thresholds: AuditThresholds,
    pub policy: DecisionPolicy,
    pub ingestion: Ingestion,
    pub max_evidence: usize,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn new(instances: impl Into<PathBuf>) -> Self {
        Self {
            instances: instances.into(),
            thresholds: AuditThresholds::default(),
            policy: DecisionPolicy::default(),
            ingestion: Ingestion::Strict,
            max_evidence: DEFAULT_MAX_EVIDENCE,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub n_instances: usize,
    pub skipped_lines: usize,
    pub failures: Vec<InstanceFailure>,
    pub summary: RunSummary,
}

/// Full run: load, audit, aggregate, evaluate, and write the manifest,
/// predictions, curve and summary into `out_dir`.
///
/// Per-instance failures are collected in the report; in strict mode any
/// failure turns into an error after the outputs are written.
pub fn run_pipeline(
    config: &RunConfig,
    scorer: &dyn Scorer,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    let loaded = load_instances(&config.instances, config.ingestion)?;
    let manifest = RunManifest {
        tool_version: tool_version(),
        dataset: DatasetRef::of_file(&config.instances)?,
        thresholds: config.thresholds,
        confidence: config.policy.confidence,
        mode: config.policy.mode,
        tau: config.policy.tau,
        scorer: if config.policy.mode == AggregationMode::NoAudit {
            "none".into()
        } else {
            scorer.describe()
        },
        max_evidence: config.max_evidence,
        ingestion: config.ingestion,
        seed: config.seed,
    };
    let run = manifest.digest();

    let prepared: Vec<Instance> = loaded
        .instances
        .iter()
        .map(|i| prepare_instance(i, config.policy.mode, config.max_evidence))
        .collect();
    let (predictions, failures) =
        decide_instances(&prepared, scorer, &config.thresholds, &config.policy);

    let by_id: std::collections::HashMap<&str, &Instance> =
        prepared.iter().map(|i| (i.id(), i)).collect();
    let records: Vec<PredictionRecord> = predictions
        .into_iter()
        .map(|p| {
            let inst = by_id[p.instance_id.as_str()];
            PredictionRecord {
                run: run.clone(),
                task: inst.task(),
                mode: config.policy.mode,
                gold_label: inst.gold_label(),
                prediction: p,
            }
        })
        .collect();

    fs::create_dir_all(out_dir).map_err(|e| IoError::file(out_dir, e))?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    jsonl::write_all(&out_dir.join(PREDICTIONS_FILE), &records)?;
    let (summary, curve) = evaluate_predictions(&records, config.policy.tau, Some(manifest.clone()))?;
    write_evaluation(out_dir, &summary, curve.as_ref())?;

    if config.ingestion == Ingestion::Strict {
        if let Some(first) = failures.first() {
            return Err(PipelineError::InstanceFailures(
                failures.len(),
                format!("{}: {}", first.instance_id, first.reason),
            ));
        }
    }
    Ok(RunReport {
        manifest,
        n_instances: loaded.instances.len(),
        skipped_lines: loaded.errors.len(),
        failures,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{ConstantScorer, ProbTriple};
    use crate::model::{Condition, RawInstance};

    fn qa_instance(n_evidence: usize) -> Instance {
        crate::model::validate_instance(RawInstance {
            id: "q".into(),
            task: Task::QuestionAnswering,
            text: "does it?".into(),
            evidence: (0..n_evidence).map(|j| format!("s{j}")).collect(),
            conditions: vec![
                Condition {
                    index: 1,
                    text: "a".into(),
                    critical: true,
                },
                Condition {
                    index: 2,
                    text: "b".into(),
                    critical: false,
                },
            ],
            gold_label: None,
        })
        .unwrap()
    }

    #[test]
    fn qa_evidence_truncated_and_undecomposed() {
        let inst = qa_instance(40);
        let p = prepare_instance(&inst, AggregationMode::Full, 30);
        assert_eq!(p.evidence().len(), 30);
        let p = prepare_instance(&inst, AggregationMode::NoDecompose, 30);
        assert_eq!(p.conditions().len(), 1);
        assert_eq!(p.conditions()[0].text, "does it?");
    }

    #[test]
    fn score_instances_covers_every_pair() {
        let scorer = ConstantScorer::new(ProbTriple::new(0.2, 0.3, 0.5).unwrap()).unwrap();
        let (records, failures) = score_instances(&[qa_instance(3)], &scorer);
        assert!(failures.is_empty());
        let keys: Vec<(u32, usize)> = records
            .iter()
            .map(|r| (r.condition_index, r.evidence_index))
            .collect();
        assert_eq!(keys, vec![(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3)]);
    }

    #[test]
    fn curve_csv_round_trip() {
        let records = vec![
            EvalRecord::new("a", 0.9, true),
            EvalRecord::new("b", 0.35, false),
            EvalRecord::new("c", 0.1, true),
        ];
        let curve = crate::selective::sweep(&records).unwrap();
        let text = curve_csv(&curve);
        assert!(text.starts_with("tau,coverage,risk,n_selected\n0.9,"));
        assert_eq!(parse_curve_csv(&text).unwrap(), curve);
    }
}

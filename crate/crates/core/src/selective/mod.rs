//! Empirical risk-coverage evaluation.
//!
//! A record answers at threshold `tau` iff its confidence is `>= tau`.
//! Risk is the 0-1 error rate among answered records and is undefined when
//! nothing is answered.

pub mod theory;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Label, RcCurve, RcPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no evaluation records")]
    EmptyRecords,
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("record {0} has a non-finite or out-of-range confidence")]
    BadConfidence(String),
    #[error("band edges must be strictly increasing within [0, 1] with at least two edges")]
    InvalidBandEdges,
}

/// One evaluated instance: its confidence and whether its label matched gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub confidence: f64,
    pub correct: bool,
}

impl EvalRecord {
    pub fn new(instance_id: impl Into<String>, confidence: f64, correct: bool) -> Self {
        Self {
            instance_id: instance_id.into(),
            confidence,
            correct,
        }
    }
}

fn check_records(records: &[EvalRecord]) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if let Some(r) = records
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.confidence))
    {
        return Err(EvalError::BadConfidence(r.instance_id.clone()));
    }
    Ok(())
}

fn point(tau: f64, n_selected: usize, n_errors: usize, n_total: usize) -> RcPoint {
    RcPoint {
        tau,
        coverage: n_selected as f64 / n_total as f64,
        risk: (n_selected > 0).then(|| n_errors as f64 / n_selected as f64),
        n_selected,
    }
}

/// Coverage and selective risk at a single threshold.
pub fn risk_coverage_at(records: &[EvalRecord], tau: f64) -> Result<RcPoint, EvalError> {
    check_records(records)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(EvalError::OutOfRange { field: "tau", value: tau });
    }
    let (selected, errors) = records
        .iter()
        .filter(|r| r.confidence >= tau)
        .fold((0, 0), |(n, e), r| (n + 1, e + usize::from(!r.correct)));
    Ok(point(tau, selected, errors, records.len()))
}

/// Operating points at every distinct confidence plus `tau = 0`.
///
/// The empirical curve only changes at observed confidences, so this grid
/// loses nothing. Points with nothing selected cannot occur here.
pub fn sweep(records: &[EvalRecord]) -> Result<RcCurve, EvalError> {
    check_records(records)?;
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let n = records.len();
    let mut points = Vec::new();
    let (mut selected, mut errors) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let tau = sorted[i].confidence;
        while i < n && sorted[i].confidence == tau {
            selected += 1;
            errors += usize::from(!sorted[i].correct);
            i += 1;
        }
        points.push(point(tau, selected, errors, n));
    }
    if sorted[n - 1].confidence > 0.0 {
        points.push(point(0.0, selected, errors, n));
    }
    Ok(RcCurve::new(points).expect("sweep points are non-empty with defined risk"))
}

/// Area under the risk-coverage curve.
///
/// Trapezoids between consecutive operating points, plus a constant
/// extension from coverage 0 up to the smallest achievable coverage at that
/// point's risk.
pub fn aurc(curve: &RcCurve) -> f64 {
    let mut it = curve.coverage_risk();
    let (mut c0, mut r0) = it.next().expect("curves are non-empty");
    let mut area = c0 * r0;
    for (c1, r1) in it {
        area += (c1 - c0) * (r0 + r1) / 2.0;
        c0 = c1;
        r0 = r1;
    }
    area
}

/// Risk at a target coverage, interpolating linearly between the bracketing
/// operating points and holding the end values outside the achievable range.
pub fn risk_at_coverage(curve: &RcCurve, phi: f64) -> Result<f64, EvalError> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(EvalError::OutOfRange { field: "phi", value: phi });
    }
    let pts: Vec<(f64, f64)> = curve.coverage_risk().collect();
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    if phi <= first.0 {
        return Ok(first.1);
    }
    if phi >= last.0 {
        return Ok(last.1);
    }
    // first index with coverage >= phi; exists and is > 0 by the checks above
    let hi = pts.partition_point(|&(c, _)| c < phi);
    let (c1, r1) = pts[hi];
    if c1 == phi {
        return Ok(r1);
    }
    let (c0, r0) = pts[hi - 1];
    Ok(r0 + (phi - c0) / (c1 - c0) * (r1 - r0))
}

/// Accuracy and macro-F1 over `(predicted, gold)` pairs at full coverage.
///
/// Macro-F1 averages per-class F1 over every label seen in either column.
pub fn classification_metrics(pairs: &[(Label, Label)]) -> Option<(f64, f64)> {
    if pairs.is_empty() {
        return None;
    }
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    let accuracy = correct as f64 / pairs.len() as f64;

    let labels: BTreeSet<Label> = pairs.iter().flat_map(|&(p, g)| [p, g]).collect();
    let f1_sum: f64 = labels
        .iter()
        .map(|&l| {
            let tp = pairs.iter().filter(|&&(p, g)| p == l && g == l).count() as f64;
            let fp = pairs.iter().filter(|&&(p, g)| p == l && g != l).count() as f64;
            let fn_ = pairs.iter().filter(|&&(p, g)| p != l && g == l).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    Some((accuracy, f1_sum / labels.len() as f64))
}

/// Headline metrics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub aurc: f64,
    #[serde(rename = "risk@0.8")]
    pub risk_at_80: f64,
    #[serde(rename = "risk@0.9")]
    pub risk_at_90: f64,
    pub risk_at_phi_interpolation: String,
}

pub fn summarize(
    pairs: &[(Label, Label)],
    records: &[EvalRecord],
) -> Result<(MetricSummary, RcCurve), EvalError> {
    let curve = sweep(records)?;
    let (accuracy, macro_f1) = classification_metrics(pairs).ok_or(EvalError::EmptyRecords)?;
    let summary = MetricSummary {
        n: records.len(),
        accuracy,
        macro_f1,
        aurc: aurc(&curve),
        risk_at_80: risk_at_coverage(&curve, 0.8)?,
        risk_at_90: risk_at_coverage(&curve, 0.9)?,
        risk_at_phi_interpolation: "linear".into(),
    };
    Ok((summary, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClaimLabel;

    fn records(confs: &[f64], correct: &[bool]) -> Vec<EvalRecord> {
        confs
            .iter()
            .zip(correct)
            .enumerate()
            .map(|(i, (&c, &ok))| EvalRecord::new(format!("r{i}"), c, ok))
            .collect()
    }

    fn four() -> Vec<EvalRecord> {
        records(&[0.9, 0.7, 0.5, 0.3], &[true, true, false, true])
    }

    fn curve(pts: &[(f64, f64)]) -> RcCurve {
        RcCurve::new(
            pts.iter()
                .enumerate()
                .map(|(i, &(coverage, risk))| RcPoint {
                    tau: 1.0 - i as f64 * 0.01,
                    coverage,
                    risk: Some(risk),
                    n_selected: 1,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn point_examples() {
        let r = four();
        let p = risk_coverage_at(&r, 0.6).unwrap();
        assert_eq!((p.coverage, p.risk, p.n_selected), (0.5, Some(0.0), 2));
        let p = risk_coverage_at(&r, 0.0).unwrap();
        assert_eq!((p.coverage, p.risk), (1.0, Some(0.25)));
        let p = risk_coverage_at(&r, 1.0).unwrap();
        assert_eq!((p.coverage, p.risk), (0.0, None));
    }

    #[test]
    fn empty_records_rejected() {
        assert_eq!(risk_coverage_at(&[], 0.5), Err(EvalError::EmptyRecords));
        assert_eq!(sweep(&[]).unwrap_err(), EvalError::EmptyRecords);
    }

    #[test]
    fn sweep_examples() {
        let c = sweep(&four()).unwrap();
        let taus: Vec<f64> = c.points().iter().map(|p| p.tau).collect();
        assert_eq!(taus, vec![0.9, 0.7, 0.5, 0.3, 0.0]);
        let covs: Vec<f64> = c.points().iter().map(|p| p.coverage).collect();
        assert_eq!(covs, vec![0.25, 0.5, 0.75, 1.0, 1.0]);

        let same = sweep(&records(&[0.4, 0.4, 0.4], &[true, false, true])).unwrap();
        let levels: BTreeSet<u64> = same.points().iter().map(|p| p.coverage.to_bits()).collect();
        assert_eq!(levels.len(), 1);
        assert_eq!(same.points()[0].coverage, 1.0);

        let one = sweep(&records(&[0.0], &[true])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one.points()[0].coverage, one.points()[0].risk), (1.0, Some(0.0)));
    }

    #[test]
    fn aurc_examples() {
        assert_eq!(aurc(&curve(&[(0.5, 0.0), (1.0, 0.5)])), 0.125);
        assert!((aurc(&curve(&[(0.2, 0.3), (0.6, 0.3), (1.0, 0.3)])) - 0.3).abs() < 1e-15);
        assert_eq!(aurc(&curve(&[(1.0, 0.25)])), 0.25);
    }

    #[test]
    fn risk_at_coverage_examples() {
        let c = curve(&[(0.5, 0.0), (1.0, 0.5)]);
        assert!((risk_at_coverage(&c, 0.8).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(risk_at_coverage(&c, 0.5).unwrap(), 0.0);
        assert_eq!(risk_at_coverage(&c, 0.2).unwrap(), 0.0);
        assert_eq!(risk_at_coverage(&curve(&[(1.0, 0.25)]), 0.9).unwrap(), 0.25);
        assert!(risk_at_coverage(&c, 0.0).is_err());
        assert!(risk_at_coverage(&c, 1.1).is_err());
    }

    #[test]
    fn risk_at_coverage_beyond_max_coverage_holds_last() {
        let c = curve(&[(0.3, 0.1), (0.6, 0.4)]);
        assert_eq!(risk_at_coverage(&c, 0.9).unwrap(), 0.4);
    }

    #[test]
    fn full_coverage_risk_is_error_rate() {
        let r = four();
        let acc = r.iter().filter(|x| x.correct).count() as f64 / r.len() as f64;
        assert_eq!(risk_coverage_at(&r, 0.0).unwrap().risk, Some(1.0 - acc));
    }

    #[test]
    fn metrics_macro_f1() {
        use ClaimLabel::*;
        let l = Label::Claim;
        let pairs = vec![
            (l(Supports), l(Supports)),
            (l(Supports), l(Refutes)),
            (l(Nei), l(Nei)),
            (l(Refutes), l(Refutes)),
        ];
        let (acc, f1) = classification_metrics(&pairs).unwrap();
        assert_eq!(acc, 0.75);
        // SUPPORTS: tp1 fp1 fn0 -> 2/3; REFUTES: tp1 fp0 fn1 -> 2/3; NEI: 1
        assert!((f1 - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!(classification_metrics(&[]).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn recs() -> impl Strategy<Value = Vec<EvalRecord>> {
            proptest::collection::vec((0u8..=20, any::<bool>()), 1..60).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (c, ok))| EvalRecord::new(format!("r{i}"), c as f64 / 20.0, ok))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn coverage_non_increasing_in_tau(r in recs(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(
                    risk_coverage_at(&r, hi).unwrap().coverage <= risk_coverage_at(&r, lo).unwrap().coverage
                );
            }

            #[test]
            fn sweep_points_match_direct_evaluation(r in recs()) {
                for p in sweep(&r).unwrap().points() {
                    prop_assert_eq!(*p, risk_coverage_at(&r, p.tau).unwrap());
                }
            }

            #[test]
            fn aurc_in_unit_interval(r in recs()) {
                let a = aurc(&sweep(&r).unwrap());
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}

//! Empirical checks of the selective-risk guarantees: rank-calibration,
//! monotonicity of risk in the threshold, the total-expectation split used
//! in the monotonicity argument, and Hoeffding concentration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{risk_coverage_at, EvalError, EvalRecord};
use crate::model::{RcCurve, RcPoint};
use crate::synth::{generate_records_shard, OracleConfig, OracleError};

/// Tolerance used when comparing two empirical risks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slack {
    /// Fixed allowance on the difference.
    Fixed(f64),
    /// Sum of the two-sided Hoeffding half-widths of both estimates at
    /// confidence level `1 - alpha`.
    Hoeffding { alpha: f64 },
}

impl Default for Slack {
    fn default() -> Self {
        Slack::Hoeffding { alpha: 0.05 }
    }
}

/// `sqrt(ln(2 / alpha) / (2 n))`: the deviation a mean of `n` values in
/// `[0, 1]` exceeds with probability at most `alpha`.
pub fn hoeffding_half_width(n: usize, alpha: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

impl Slack {
    /// Offsets `(a, b)` such that a pair is flagged when
    /// `risk_a - a(n_a) > risk_b + b(n_b)`.
    fn offsets(&self, n_a: usize, n_b: usize) -> (f64, f64) {
        match *self {
            Slack::Fixed(delta) => (0.0, delta),
            Slack::Hoeffding { alpha } => (
                hoeffding_half_width(n_a, alpha),
                hoeffding_half_width(n_b, alpha),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRisk {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankViolation {
    /// Index into the report's bands.
    pub band: usize,
    pub band_risk: f64,
    /// Risk of every record with confidence at or above the band's upper edge.
    pub tail_risk: f64,
    pub tail_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCalibrationReport {
    pub bands: Vec<BandRisk>,
    pub violations: Vec<RankViolation>,
}

fn mean_loss<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> (usize, Option<f64>) {
    let (n, e) = records.fold((0usize, 0usize), |(n, e), r| (n + 1, e + usize::from(!r.correct)));
    (n, (n > 0).then(|| e as f64 / n as f64))
}

/// Per-band empirical risk and every band whose risk is lower than that of
/// the higher-confidence tail beyond the slack.
///
/// Bands are `[edge_i, edge_{i+1})`; the last band also takes records equal
/// to its upper edge. A band is only compared when a later band exists.
/// Empty bands are reported with `risk: None` and never flagged.
pub fn rank_calibration_report(
    records: &[EvalRecord],
    band_edges: &[f64],
    slack: Slack,
) -> Result<RankCalibrationReport, EvalError> {
    if band_edges.len() < 2
        || band_edges.windows(2).any(|w| w[0] >= w[1])
        || band_edges[0] < 0.0
        || band_edges[band_edges.len() - 1] > 1.0
    {
        return Err(EvalError::InvalidBandEdges);
    }
    let last = band_edges.len() - 2;
    let bands: Vec<BandRisk> = band_edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (lo, hi) = (w[0], w[1]);
            let (n, risk) = mean_loss(records.iter().filter(|r| {
                r.confidence >= lo && (r.confidence < hi || (i == last && r.confidence == hi))
            }));
            BandRisk { lo, hi, n, risk }
        })
        .collect();

    let mut violations = Vec::new();
    for (i, band) in bands.iter().enumerate().take(last) {
        let (tail_n, tail_risk) = mean_loss(records.iter().filter(|r| r.confidence >= band.hi));
        if let (Some(band_risk), Some(tail_risk)) = (band.risk, tail_risk) {
            // flagged when the tail is riskier than the band below it
            let (a, b) = slack.offsets(tail_n, band.n);
            if tail_risk - a > band_risk + b {
                violations.push(RankViolation {
                    band: i,
                    band_risk,
                    tail_risk,
                    tail_n,
                });
            }
        }
    }
    Ok(RankCalibrationReport { bands, violations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    /// Point at lower coverage (stricter threshold).
    pub lower: RcPoint,
    /// Point at higher coverage whose risk is exceeded.
    pub higher: RcPoint,
}

/// Pairs where a stricter threshold has higher risk than a looser one
/// beyond the slack.
///
/// Every ordered pair of points is considered, not only neighbours: with
/// distinct confidences neighbouring points differ by a single record and
/// can never separate by more than a sampling allowance. For each point the
/// worst lower-coverage partner is reported.
pub fn monotonicity_check(curve: &RcCurve, slack: Slack) -> Vec<MonotonicityViolation> {
    let pts = curve.points();
    let risk = |p: &RcPoint| p.risk.expect("curve points carry risk");
    let mut violations = Vec::new();
    // running maximum of risk_i - a(n_i) over earlier points
    let mut best: Option<(f64, usize)> = None;
    for (j, pj) in pts.iter().enumerate() {
        if let Some((score, i)) = best {
            let (_, b) = slack.offsets(pts[i].n_selected, pj.n_selected);
            if score > risk(pj) + b && pts[i].coverage < pj.coverage {
                violations.push(MonotonicityViolation {
                    lower: pts[i],
                    higher: *pj,
                });
            }
        }
        let (a, _) = slack.offsets(pj.n_selected, 0);
        let score = risk(pj) - a;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, j));
        }
    }
    violations
}

/// Both sides of the total-expectation split between two thresholds:
/// `R(t1) phi(t1)` and `R(t2) phi(t2) + R_mid (phi(t1) - phi(t2))`, where
/// `R_mid` is the risk of records with confidence in `[t1, t2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalExpectation {
    pub lhs: f64,
    pub rhs: f64,
}

impl TotalExpectation {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

pub fn total_expectation_split(
    records: &[EvalRecord],
    tau1: f64,
    tau2: f64,
) -> Result<TotalExpectation, EvalError> {
    if tau1 >= tau2 {
        return Err(EvalError::OutOfRange { field: "tau1", value: tau1 });
    }
    let p1 = risk_coverage_at(records, tau1)?;
    let p2 = risk_coverage_at(records, tau2)?;
    let (_, mid) = mean_loss(
        records
            .iter()
            .filter(|r| r.confidence >= tau1 && r.confidence < tau2),
    );
    let weighted = |p: &RcPoint| p.risk.unwrap_or(0.0) * p.coverage;
    Ok(TotalExpectation {
        lhs: weighted(&p1),
        rhs: weighted(&p2) + mid.unwrap_or(0.0) * (p1.coverage - p2.coverage),
    })
}

/// `2 exp(-2 n eps^2)`, the two-sided Hoeffding bound on
/// `P(|R_hat - R| > eps)` given `n` selected records.
pub fn concentration_bound(n_selected: usize, epsilon: f64) -> Result<f64, EvalError> {
    if n_selected == 0 {
        return Err(EvalError::OutOfRange {
            field: "n_selected",
            value: 0.0,
        });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(EvalError::OutOfRange {
            field: "epsilon",
            value: epsilon,
        });
    }
    Ok(2.0 * (-2.0 * n_selected as f64 * epsilon * epsilon).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub trials: usize,
    /// Trials where nothing was selected; excluded from the frequency.
    pub empty_trials: usize,
    pub exceedances: usize,
    pub frequency: f64,
    pub mean_n_selected: f64,
    pub true_risk: f64,
    /// Average of the per-trial bound at each trial's selected count.
    pub bound: f64,
    /// Standard error of a Bernoulli frequency at rate `min(bound, 1)`.
    pub mc_sigma: f64,
}

impl ConcentrationReport {
    /// Frequency within the bound plus `k` Monte Carlo standard errors.
    pub fn holds(&self, k: f64) -> bool {
        self.frequency <= self.bound + k * self.mc_sigma
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("oracle selects nothing at tau = {0}")]
    ZeroCoverage(f64),
}

/// Repeats dataset draws and counts how often `|R_hat(tau) - R(tau)| > eps`.
///
/// Trial `t` uses stream `t` of the configured seed; trials run in
/// parallel and are reduced in trial order.
pub fn concentration_experiment(
    config: &OracleConfig,
    tau: f64,
    epsilon: f64,
    trials: usize,
) -> Result<ConcentrationReport, ExperimentError> {
    if trials == 0 {
        return Err(EvalError::OutOfRange {
            field: "trials",
            value: 0.0,
        }
        .into());
    }
    concentration_bound(1, epsilon)?;
    let outcomes: Vec<(usize, bool, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<_, ExperimentError> {
            let (records, curve) = generate_records_shard(config, t)?;
            let true_risk = curve.risk(tau).ok_or(ExperimentError::ZeroCoverage(tau))?;
            let p = risk_coverage_at(&records, tau)?;
            let exceeded = p.risk.is_some_and(|r| (r - true_risk).abs() > epsilon);
            Ok((p.n_selected, exceeded, true_risk))
        })
        .collect::<Result<_, _>>()?;

    let true_risk = outcomes[0].2;
    let selected: Vec<&(usize, bool, f64)> = outcomes.iter().filter(|o| o.0 > 0).collect();
    let empty_trials = trials - selected.len();
    let exceedances = selected.iter().filter(|o| o.1).count();
    let m = selected.len().max(1) as f64;
    let bound = selected
        .iter()
        .map(|o| concentration_bound(o.0, epsilon).expect("n > 0, eps > 0"))
        .sum::<f64>()
        / m;
    let capped = bound.min(1.0);
    Ok(ConcentrationReport {
        trials,
        empty_trials,
        exceedances,
        frequency: exceedances as f64 / m,
        mean_n_selected: selected.iter().map(|o| o.0 as f64).sum::<f64>() / m,
        true_risk,
        bound,
        mc_sigma: (capped * (1.0 - capped) / m).sqrt(),
    })
}

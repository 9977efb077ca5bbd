//! Synthetic data with known ground truth.
//!
//! Two generators share one configuration:
//!
//! * [`generate_records`] draws evaluation records whose confidence falls in
//!   profile bands with a configured error rate per band, and returns the
//!   population risk-coverage curve alongside.
//! * [`generate_instances`] plants audit outcomes for every condition, picks
//!   per-pair NLI scores well clear of the decision thresholds, and emits the
//!   matching score file, so the full pipeline must reproduce the planted
//!   labels.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`. Shard
//! `s` of a parallel job uses the same key with stream number `s`, which
//! keeps results byte-identical across platforms and thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditThresholds;
use crate::decision::{aggregate_claim, aggregate_qa};
use crate::io::scores::ScoreRecord;
use crate::model::{
    validate_instance, AuditStatus, ClaimLabel, Condition, ConditionAudit, EvidenceScores,
    Instance, Label, QaLabel, RawInstance, RcPoint, Task,
};
use crate::selective::EvalRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid oracle profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Error rate never rises with confidence.
    RankCalibrated,
    /// Error rate rises with confidence.
    AntiCalibrated,
    /// Same error rate everywhere.
    UniformNoise,
}

/// Confidence interval `[lo, hi)` with its error probability and sampling weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskBand {
    pub lo: f64,
    pub hi: f64,
    pub error_rate: f64,
    pub weight: f64,
}

impl RiskBand {
    /// Band weighted by its width, so confidence is uniform on `[0, 1]`
    /// when bands tile the interval.
    pub fn uniform(lo: f64, hi: f64, error_rate: f64) -> Self {
        Self {
            lo,
            hi,
            error_rate,
            weight: hi - lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub n_instances: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub critical_fraction: f64,
    pub regime: Regime,
    pub profile: Vec<RiskBand>,
    pub seed: u64,
    pub task: Task,
    pub evidence_min: usize,
    pub evidence_max: usize,
    /// Planted scores sit this far past the relevant threshold.
    pub planting_gap: f64,
    pub thresholds: AuditThresholds,
}

impl OracleConfig {
    pub fn new(regime: Regime, n_instances: usize, seed: u64) -> Self {
        Self {
            n_instances,
            k_min: 2,
            k_max: 4,
            critical_fraction: 0.65,
            regime,
            profile: default_profile(regime),
            seed,
            task: Task::ClaimVerification,
            evidence_min: 2,
            evidence_max: 5,
            planting_gap: 0.15,
            thresholds: AuditThresholds::default(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |msg: String| Err(OracleError::InvalidProfile(msg));
        if self.n_instances == 0 {
            return bad("n_instances must be positive".into());
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!("bad condition range {}..={}", self.k_min, self.k_max));
        }
        if self.evidence_min == 0 || self.evidence_min > self.evidence_max {
            return bad(format!(
                "bad evidence range {}..={}",
                self.evidence_min, self.evidence_max
            ));
        }
        if !(0.0..=1.0).contains(&self.critical_fraction) {
            return bad(format!("critical_fraction {}", self.critical_fraction));
        }
        let th = &self.thresholds;
        let gap = self.planting_gap;
        if gap.is_nan()
            || gap <= 0.0
            || th.theta_ent().max(th.theta_con()) + gap > 1.0
            || th.theta_ent().min(th.theta_con()) - gap <= 0.0
        {
            return bad(format!("planting gap {gap} does not fit the thresholds"));
        }
        validate_profile(self.regime, &self.profile)
    }
}

/// Four equal-width bands whose error rates follow the regime.
pub fn default_profile(regime: Regime) -> Vec<RiskBand> {
    let rates = match regime {
        Regime::RankCalibrated => [0.45, 0.35, 0.2, 0.05],
        Regime::AntiCalibrated => [0.05, 0.2, 0.35, 0.45],
        Regime::UniformNoise => [0.3; 4],
    };
    rates
        .iter()
        .enumerate()
        .map(|(i, &e)| RiskBand::uniform(i as f64 * 0.25, (i + 1) as f64 * 0.25, e))
        .collect()
}

fn validate_profile(regime: Regime, bands: &[RiskBand]) -> Result<(), OracleError> {
    let bad = |msg: String| Err(OracleError::InvalidProfile(msg));
    if bands.is_empty() {
        return bad("profile has no bands".into());
    }
    for b in bands {
        if !(0.0..=1.0).contains(&b.lo) || !(0.0..=1.0).contains(&b.hi) || b.lo >= b.hi {
            return bad(format!("band [{}, {}) is not a sub-interval of [0, 1]", b.lo, b.hi));
        }
        if !(0.0..=1.0).contains(&b.error_rate) {
            return bad(format!("error rate {} outside [0, 1]", b.error_rate));
        }
        if !(b.weight > 0.0 && b.weight.is_finite()) {
            return bad(format!("band weight {} must be positive", b.weight));
        }
    }
    if bands.windows(2).any(|w| w[0].hi > w[1].lo) {
        return bad("bands must be sorted and non-overlapping".into());
    }
    let rates: Vec<f64> = bands.iter().map(|b| b.error_rate).collect();
    let ok = match regime {
        Regime::RankCalibrated => rates.windows(2).all(|w| w[0] >= w[1]),
        Regime::AntiCalibrated => {
            rates.windows(2).all(|w| w[0] <= w[1]) && rates[0] < rates[rates.len() - 1]
        }
        Regime::UniformNoise => rates.windows(2).all(|w| w[0] == w[1]),
    };
    if !ok {
        return bad(format!("error rates {rates:?} do not match regime {regime:?}"));
    }
    Ok(())
}

/// Population risk-coverage curve of a band profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticCurve {
    bands: Vec<RiskBand>,
    total_weight: f64,
}

impl AnalyticCurve {
    pub fn new(bands: Vec<RiskBand>) -> Self {
        let total_weight = bands.iter().map(|b| b.weight).sum();
        Self {
            bands,
            total_weight,
        }
    }

    fn selected_masses(&self, tau: f64) -> (f64, f64) {
        self.bands.iter().fold((0.0, 0.0), |(cov, err), b| {
            let frac = ((b.hi - tau.max(b.lo)) / (b.hi - b.lo)).clamp(0.0, 1.0);
            let mass = b.weight / self.total_weight * frac;
            (cov + mass, err + mass * b.error_rate)
        })
    }

    /// Probability that a fresh record is answered at `tau`.
    pub fn coverage(&self, tau: f64) -> f64 {
        self.selected_masses(tau).0
    }

    /// Expected 0-1 loss among answered records; `None` at zero coverage.
    pub fn risk(&self, tau: f64) -> Option<f64> {
        let (cov, err) = self.selected_masses(tau);
        (cov > 0.0).then(|| err / cov)
    }

    /// Operating points at each band's lower edge.
    pub fn points(&self) -> Vec<RcPoint> {
        self.bands
            .iter()
            .map(|b| RcPoint {
                tau: b.lo,
                coverage: self.coverage(b.lo),
                risk: self.risk(b.lo),
                n_selected: 0,
            })
            .collect()
    }
}

/// ChaCha8 generator for one shard of a seeded job.
pub fn shard_rng(seed: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    rng
}

fn pick_band<'a>(rng: &mut ChaCha8Rng, bands: &'a [RiskBand], total: f64) -> &'a RiskBand {
    let mut u = rng.random::<f64>() * total;
    for b in bands {
        if u < b.weight {
            return b;
        }
        u -= b.weight;
    }
    &bands[bands.len() - 1]
}

/// Draws `config.n_instances` records and returns the population curve too.
pub fn generate_records(
    config: &OracleConfig,
) -> Result<(Vec<EvalRecord>, AnalyticCurve), OracleError> {
    generate_records_shard(config, 0)
}

/// As [`generate_records`], from stream `shard` of the configured seed.
pub fn generate_records_shard(
    config: &OracleConfig,
    shard: u64,
) -> Result<(Vec<EvalRecord>, AnalyticCurve), OracleError> {
    validate_profile(config.regime, &config.profile)?;
    if config.n_instances == 0 {
        return Err(OracleError::InvalidProfile("n_instances must be positive".into()));
    }
    let curve = AnalyticCurve::new(config.profile.clone());
    let mut rng = shard_rng(config.seed, shard);
    let records = (0..config.n_instances)
        .map(|i| {
            let band = pick_band(&mut rng, &config.profile, curve.total_weight);
            let confidence = band.lo + rng.random::<f64>() * (band.hi - band.lo);
            let wrong = rng.random::<f64>() < band.error_rate;
            EvalRecord::new(format!("r{i}"), confidence, !wrong)
        })
        .collect();
    Ok((records, curve))
}

/// Planted audit outcomes for one synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub id: String,
    pub label: Label,
    pub statuses: Vec<AuditStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub instances: Vec<Instance>,
    /// Pair scores for the decomposed conditions.
    pub scores: Vec<ScoreRecord>,
    /// Pair scores for each instance audited as one whole-input condition.
    pub undecomposed_scores: Vec<ScoreRecord>,
    pub planted: Vec<PlantedInstance>,
}

fn choose<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Statuses for the critical conditions that force `label`, given how many there are.
fn plant_critical(rng: &mut ChaCha8Rng, label: Label, n: usize) -> Vec<AuditStatus> {
    use AuditStatus::{Contradicted as CON, Missing as MIS, Supported as SUP};
    let (forced, rest): (Option<AuditStatus>, &[AuditStatus]) = match label {
        Label::Claim(ClaimLabel::Supports) => (None, &[SUP]),
        Label::Claim(ClaimLabel::Refutes) | Label::Qa(QaLabel::No) => (Some(CON), &[SUP, CON, MIS]),
        Label::Claim(ClaimLabel::Nei) => (Some(MIS), &[SUP, MIS]),
        Label::Qa(QaLabel::Yes) => (Some(SUP), &[SUP, MIS]),
        Label::Qa(QaLabel::Maybe) => (None, &[MIS]),
    };
    let mut out: Vec<AuditStatus> = (0..n).map(|_| choose(rng, rest)).collect();
    if let Some(f) = forced {
        let at = rng.random_range(0..n);
        out[at] = f;
    }
    out
}

/// Probability triples for one condition that audit to `status`.
fn plant_pairs(
    rng: &mut ChaCha8Rng,
    status: AuditStatus,
    n_evidence: usize,
    thresholds: &AuditThresholds,
    gap: f64,
) -> Vec<(f64, f64, f64)> {
    let (te, tc) = (thresholds.theta_ent(), thresholds.theta_con());
    let high = |rng: &mut ChaCha8Rng, theta: f64| {
        let lo = theta + gap;
        lo + rng.random::<f64>() * (1.0f64.min(lo + 0.1) - lo)
    };
    let low = |rng: &mut ChaCha8Rng, ceiling: f64| rng.random::<f64>() * ceiling;
    let key = rng.random_range(0..n_evidence);
    (0..n_evidence)
        .map(|j| {
            let (e, c) = match status {
                AuditStatus::Supported if j == key => {
                    let e = high(rng, te);
                    (e, low(rng, (tc - gap).min(1.0 - e)))
                }
                AuditStatus::Contradicted if j == key => {
                    let c = high(rng, tc);
                    (low(rng, (te - gap).min(1.0 - c)), c)
                }
                _ => {
                    let e = low(rng, te - gap);
                    (e, low(rng, (tc - gap).min(1.0 - e)))
                }
            };
            (e, c, 1.0 - e - c)
        })
        .collect()
}

fn score_records<'a>(
    id: &'a str,
    condition_index: u32,
    triples: &'a [(f64, f64, f64)],
) -> impl Iterator<Item = ScoreRecord> + 'a {
    triples
        .iter()
        .enumerate()
        .map(move |(j, &(e, c, n))| ScoreRecord {
            instance_id: id.to_string(),
            condition_index,
            evidence_index: j + 1,
            p_entail: e,
            p_contradict: c,
            p_neutral: n,
        })
}

/// Label the rules produce on a planted status vector.
fn rule_label(task: Task, conditions: &[Condition], statuses: &[AuditStatus]) -> Label {
    let audits: Vec<ConditionAudit> = conditions
        .iter()
        .zip(statuses)
        .map(|(c, &s)| ConditionAudit::new(c.clone(), EvidenceScores::empty(), s))
        .collect();
    match task {
        Task::ClaimVerification => Label::Claim(aggregate_claim(&audits).expect("planted critical")),
        Task::QuestionAnswering => Label::Qa(aggregate_qa(&audits).expect("planted critical")),
    }
}

/// Instances with planted labels and the score files that realize them.
pub fn generate_instances(config: &OracleConfig) -> Result<SyntheticDataset, OracleError> {
    config.validate()?;
    let mut rng = shard_rng(config.seed, 0);
    let task = config.task;
    let noun = match task {
        Task::ClaimVerification => "claim",
        Task::QuestionAnswering => "question",
    };

    let mut dataset = SyntheticDataset {
        instances: Vec::with_capacity(config.n_instances),
        scores: Vec::new(),
        undecomposed_scores: Vec::new(),
        planted: Vec::with_capacity(config.n_instances),
    };
    for i in 0..config.n_instances {
        let id = format!("synth-{i:05}");
        let label = choose(&mut rng, task.labels());
        let k = rng.random_range(config.k_min..=config.k_max);
        let n_evidence = rng.random_range(config.evidence_min..=config.evidence_max);

        let mut critical: Vec<bool> = (0..k)
            .map(|_| rng.random::<f64>() < config.critical_fraction)
            .collect();
        if !critical.contains(&true) {
            let at = rng.random_range(0..k);
            critical[at] = true;
        }
        let n_critical = critical.iter().filter(|&&c| c).count();
        let mut crit_statuses = plant_critical(&mut rng, label, n_critical).into_iter();
        let statuses: Vec<AuditStatus> = critical
            .iter()
            .map(|&c| {
                if c {
                    crit_statuses.next().expect("one status per critical condition")
                } else {
                    choose(&mut rng, &AuditStatus::ALL)
                }
            })
            .collect();

        let conditions: Vec<Condition> = (0..k)
            .map(|c| Condition {
                index: c as u32 + 1,
                text: format!("condition {} of {noun} {id}", c + 1),
                critical: critical[c],
            })
            .collect();
        debug_assert_eq!(rule_label(task, &conditions, &statuses), label);

        for (c, &status) in conditions.iter().zip(&statuses) {
            let triples = plant_pairs(
                &mut rng,
                status,
                n_evidence,
                &config.thresholds,
                config.planting_gap,
            );
            dataset.scores.extend(score_records(&id, c.index, &triples));
        }
        let whole_status = match label {
            Label::Claim(ClaimLabel::Supports) | Label::Qa(QaLabel::Yes) => AuditStatus::Supported,
            Label::Claim(ClaimLabel::Refutes) | Label::Qa(QaLabel::No) => {
                AuditStatus::Contradicted
            }
            _ => AuditStatus::Missing,
        };
        let whole = plant_pairs(
            &mut rng,
            whole_status,
            n_evidence,
            &config.thresholds,
            config.planting_gap,
        );
        dataset.undecomposed_scores.extend(score_records(&id, 1, &whole));

        let instance = validate_instance(RawInstance {
            id: id.clone(),
            task,
            text: format!("synthetic {noun} {id}"),
            evidence: (1..=n_evidence)
                .map(|j| format!("evidence sentence {j} for {id}"))
                .collect(),
            conditions,
            gold_label: Some(label),
        })
        .map_err(|e| OracleError::InvalidProfile(e.to_string()))?;
        dataset.instances.push(instance);
        dataset.planted.push(PlantedInstance { id, label, statuses });
    }
    Ok(dataset)
}

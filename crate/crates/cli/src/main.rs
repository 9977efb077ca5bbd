use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use abstention_core::audit::{AuditThresholds, ConstantScorer, ProbTriple, Scorer};
use abstention_core::confidence::ConfidenceAggregator;
use abstention_core::decision::{AggregationMode, DecisionPolicy};
use abstention_core::io::instances::{load_instances, write_instances};
use abstention_core::io::jsonl;
use abstention_core::io::manifest::DEFAULT_MAX_EVIDENCE;
use abstention_core::io::pipeline::{
    evaluate_predictions, prepare_instance, run_pipeline, score_instances, write_evaluation,
    PredictionRecord, RunConfig, RunSummary,
};
use abstention_core::io::remote::{HttpTransport, RemoteScorer, RetryPolicy, TOKEN_ENV};
use abstention_core::io::scores::{write_scores, PrecomputedScores};
use abstention_core::io::Ingestion;
use abstention_core::model::Task;
use abstention_core::selective::theory::{
    concentration_experiment, monotonicity_check, rank_calibration_report,
    total_expectation_split, Slack,
};
use abstention_core::selective::{sweep, EvalRecord};
use abstention_core::synth::{generate_instances, generate_records, OracleConfig, Regime};

#[derive(Parser)]
#[command(name = "abstain", version, about = "Abstention-aware verification runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every (condition, evidence) pair and write a score file.
    Audit(AuditArgs),
    /// Audit, aggregate and evaluate; writes manifest, predictions, curve and summary.
    Decide(DecideArgs),
    /// Recompute the curve and summary from a predictions file.
    Sweep(SweepArgs),
    /// Print a summary file as a table.
    Report(ReportArgs),
    /// Generate a synthetic dataset with planted labels.
    Synth(SynthArgs),
    /// Run the theory checks on synthetic or recorded predictions.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    NoDecompose,
    NoAudit,
}

impl From<ModeArg> for AggregationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AggregationMode::Full,
            ModeArg::NoDecompose => AggregationMode::NoDecompose,
            ModeArg::NoAudit => AggregationMode::NoAudit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfidenceArg {
    Max,
    Min,
    Mean,
}

impl From<ConfidenceArg> for ConfidenceAggregator {
    fn from(c: ConfidenceArg) -> Self {
        match c {
            ConfidenceArg::Max => ConfidenceAggregator::Max,
            ConfidenceArg::Min => ConfidenceAggregator::Min,
            ConfidenceArg::Mean => ConfidenceAggregator::Mean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    RankCalibrated,
    AntiCalibrated,
    UniformNoise,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::RankCalibrated => Regime::RankCalibrated,
            RegimeArg::AntiCalibrated => Regime::AntiCalibrated,
            RegimeArg::UniformNoise => Regime::UniformNoise,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Claim,
    Qa,
}

#[derive(Args)]
struct InputArgs {
    /// Instance file (JSONL).
    #[arg(long)]
    instances: PathBuf,
    /// Fail on any bad line or failed instance (the default).
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Skip bad lines and keep going past failed instances.
    #[arg(long)]
    lenient: bool,
    /// Question-answering evidence is cut to this many sentences.
    #[arg(long, default_value_t = DEFAULT_MAX_EVIDENCE)]
    max_evidence: usize,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
}

impl InputArgs {
    fn ingestion(&self) -> Ingestion {
        if self.lenient {
            Ingestion::Lenient
        } else {
            Ingestion::Strict
        }
    }
}

#[derive(Args)]
struct ScorerArgs {
    /// Precomputed score file (JSONL).
    #[arg(long, group = "backend")]
    scores: Option<PathBuf>,
    /// Remote scorer URL; the bearer token is read from ABSTAIN_SCORER_TOKEN.
    #[arg(long, group = "backend")]
    endpoint: Option<String>,
    /// Same triple for every pair, as `entail,contradict,neutral`.
    #[arg(long, group = "backend")]
    constant: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Output score file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecideArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value_t = 0.7)]
    theta_ent: f64,
    #[arg(long, default_value_t = 0.7)]
    theta_con: f64,
    #[arg(long, value_enum, default_value = "max")]
    confidence: ConfidenceArg,
    /// Abstain when confidence is below this value.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    /// Recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Threshold for the single operating point in the summary.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more summary files.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "claim")]
    task: TaskArg,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Check recorded predictions instead of synthetic data.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "rank-calibrated")]
    regime: RegimeArg,
    /// Fixed slack on risk differences; Hoeffding slack when omitted.
    #[arg(long)]
    delta: Option<f64>,
    /// Confidence level parameter for the Hoeffding slack.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    trials: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

/// Failure category, mapped to the exit code.
enum Failure {
    Usage(String),
    Run(String),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Audit(a) => audit(a),
        Command::Decide(a) => decide(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn parse_triple(s: &str) -> Result<ProbTriple, Failure> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--constant {s:?}: {e}")))?;
    let [e, c, n] = parts[..] else {
        return Err(usage(format!("--constant needs three values, got {s:?}")));
    };
    ProbTriple::new(e, c, n).map_err(usage)
}

fn build_scorer(args: &ScorerArgs, required: bool) -> Result<Box<dyn Scorer>, Failure> {
    if let Some(path) = &args.scores {
        return Ok(Box::new(PrecomputedScores::load(path).map_err(run_err)?));
    }
    if let Some(url) = &args.endpoint {
        if std::env::var(TOKEN_ENV).is_err() {
            eprintln!("note: {TOKEN_ENV} is not set; sending requests without a token");
        }
        let transport = HttpTransport::new(url.clone(), Duration::from_secs(args.timeout_secs));
        let retry = RetryPolicy {
            max_attempts: args.max_attempts.max(1),
            ..RetryPolicy::default()
        };
        return Ok(Box::new(RemoteScorer::new(transport, args.batch_size, retry)));
    }
    if let Some(spec) = &args.constant {
        return Ok(Box::new(ConstantScorer::new(parse_triple(spec)?).map_err(usage)?));
    }
    if required {
        Err(usage("one of --scores, --endpoint or --constant is required"))
    } else {
        // never consulted in no-audit mode
        Ok(Box::new(
            ConstantScorer::new(ProbTriple::new(0.0, 0.0, 1.0).expect("valid triple"))
                .expect("valid scorer"),
        ))
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| run_err(format!("{}: {e}", dir.display())))
}

fn audit(args: AuditArgs) -> CmdResult {
    let mode: AggregationMode = args.input.mode.into();
    if mode == AggregationMode::NoAudit {
        return Err(usage("audit has nothing to score in no-audit mode"));
    }
    let scorer = build_scorer(&args.scorer, true)?;
    let loaded = load_instances(&args.input.instances, args.input.ingestion()).map_err(run_err)?;
    for e in &loaded.errors {
        eprintln!("skipped line {}: {}", e.line, e.reason);
    }
    let prepared: Vec<_> = loaded
        .instances
        .iter()
        .map(|i| prepare_instance(i, mode, args.input.max_evidence))
        .collect();
    let (records, failures) = score_instances(&prepared, scorer.as_ref());
    write_scores(&args.out, &records).map_err(run_err)?;
    for f in &failures {
        eprintln!("failed {}: {}", f.instance_id, f.reason);
    }
    eprintln!(
        "scored {} pairs over {} instances",
        records.len(),
        prepared.len() - failures.len()
    );
    if !failures.is_empty() && args.input.ingestion() == Ingestion::Strict {
        return Err(run_err(format!("{} instance(s) failed", failures.len())));
    }
    Ok(())
}

fn decide(args: DecideArgs) -> CmdResult {
    let thresholds = AuditThresholds::new(args.theta_ent, args.theta_con).map_err(usage)?;
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(usage(format!("--tau {} is outside [0, 1]", args.tau)));
    }
    let mode: AggregationMode = args.input.mode.into();
    let scorer = build_scorer(&args.scorer, mode != AggregationMode::NoAudit)?;
    let config = RunConfig {
        instances: args.input.instances.clone(),
        thresholds,
        policy: DecisionPolicy {
            mode,
            confidence: args.confidence.into(),
            tau: args.tau,
        },
        ingestion: args.input.ingestion(),
        max_evidence: args.input.max_evidence,
        seed: args.seed,
    };
    let report = run_pipeline(&config, scorer.as_ref(), &args.out_dir).map_err(run_err)?;
    for f in &report.failures {
        eprintln!("failed {}: {}", f.instance_id, f.reason);
    }
    print_summary(&args.out_dir.display().to_string(), &report.summary);
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> CmdResult {
    let records: Vec<PredictionRecord> = jsonl::read_all(&args.predictions).map_err(run_err)?;
    let (summary, curve) = evaluate_predictions(&records, args.tau, None).map_err(run_err)?;
    if curve.is_none() {
        return Err(run_err("no prediction carries a gold label"));
    }
    create_dir(&args.out_dir)?;
    write_evaluation(&args.out_dir, &summary, curve.as_ref()).map_err(run_err)?;
    print_summary(&args.predictions.display().to_string(), &summary);
    Ok(())
}

fn print_header() {
    println!(
        "{:<32} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "run", "n", "acc", "macroF1", "AURC", "R@0.8", "R@0.9", "cov@tau"
    );
}

fn print_row(name: &str, s: &RunSummary) {
    let cov = s
        .at_tau
        .map(|p| format!("{:.4}", p.coverage))
        .unwrap_or_else(|| "-".into());
    match &s.metrics {
        Some(m) => println!(
            "{:<32} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10}",
            name, m.n, m.accuracy, m.macro_f1, m.aurc, m.risk_at_80, m.risk_at_90, cov
        ),
        None => println!("{:<32} {:>6} {:>8}", name, s.n_predictions, "no gold"),
    }
}

fn print_summary(name: &str, s: &RunSummary) {
    print_header();
    print_row(name, s);
}

fn report(args: ReportArgs) -> CmdResult {
    print_header();
    for path in &args.summaries {
        let text = fs::read_to_string(path).map_err(|e| run_err(format!("{}: {e}", path.display())))?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| run_err(format!("{}: {e}", path.display())))?;
        let name = summary
            .manifest
            .as_ref()
            .map(|m| format!("{} {}/{}", m.mode.as_str(), m.confidence.as_str(), m.tau))
            .unwrap_or_else(|| path.display().to_string());
        print_row(&name, &summary);
    }
    Ok(())
}

fn synth(args: SynthArgs) -> CmdResult {
    let mut config = OracleConfig::new(Regime::RankCalibrated, args.n, args.seed);
    config.task = match args.task {
        TaskArg::Claim => Task::ClaimVerification,
        TaskArg::Qa => Task::QuestionAnswering,
    };
    config.k_min = args.k_min;
    config.k_max = args.k_max;
    let data = generate_instances(&config).map_err(usage)?;
    create_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    write_instances(&dir.join("instances.jsonl"), &data.instances).map_err(run_err)?;
    write_scores(&dir.join("scores.jsonl"), &data.scores).map_err(run_err)?;
    write_scores(&dir.join("scores_undecomposed.jsonl"), &data.undecomposed_scores)
        .map_err(run_err)?;
    jsonl::write_all(&dir.join("planted.jsonl"), &data.planted).map_err(run_err)?;
    eprintln!(
        "wrote {} instances and {} pair scores to {}",
        data.instances.len(),
        data.scores.len(),
        dir.display()
    );
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn check(args: CheckArgs) -> CmdResult {
    let slack = match args.delta {
        Some(d) if d >= 0.0 => Slack::Fixed(d),
        Some(d) => return Err(usage(format!("--delta {d} must be non-negative"))),
        None => Slack::Hoeffding { alpha: args.alpha },
    };
    let (records, expect_monotone) = match &args.predictions {
        Some(path) => {
            let preds: Vec<PredictionRecord> = jsonl::read_all(path).map_err(run_err)?;
            let records: Vec<EvalRecord> = preds
                .iter()
                .filter_map(|p| {
                    p.correct().map(|c| {
                        EvalRecord::new(p.prediction.instance_id.clone(), p.prediction.confidence, c)
                    })
                })
                .collect();
            (records, true)
        }
        None => {
            let regime: Regime = args.regime.into();
            let config = OracleConfig::new(regime, args.n, args.seed);
            let (records, _) = generate_records(&config).map_err(usage)?;
            (records, regime != Regime::AntiCalibrated)
        }
    };
    if records.is_empty() {
        return Err(run_err("no records with gold labels to check"));
    }

    let mut all_ok = true;
    let curve = sweep(&records).map_err(run_err)?;
    let violations = monotonicity_check(&curve, slack);
    let ok = violations.is_empty() == expect_monotone;
    all_ok &= ok;
    println!(
        "{} monotonicity: {} violation(s) over {} curve points (expected {})",
        verdict(ok),
        violations.len(),
        curve.len(),
        if expect_monotone { "none" } else { "some" }
    );

    let edges = [0.0, 0.25, 0.5, 0.75, 1.0];
    let bands = rank_calibration_report(&records, &edges, slack).map_err(run_err)?;
    println!(
        "INFO rank calibration: {} band(s) below their tail: {:?}",
        bands.violations.len(),
        bands.violations.iter().map(|v| v.band).collect::<Vec<_>>()
    );

    let mut taus: Vec<f64> = curve.points().iter().map(|p| p.tau).collect();
    taus.sort_by(f64::total_cmp);
    // every pair on small curves; neighbours and pairs with the loosest threshold otherwise
    let pairs: Vec<(f64, f64)> = if taus.len() <= 200 {
        taus.iter()
            .enumerate()
            .flat_map(|(i, &a)| taus[i + 1..].iter().map(move |&b| (a, b)))
            .collect()
    } else {
        taus.windows(2)
            .map(|w| (w[0], w[1]))
            .chain(taus[1..].iter().map(|&b| (taus[0], b)))
            .collect()
    };
    let mut worst = 0.0f64;
    for (lo, hi) in pairs {
        worst = worst.max(total_expectation_split(&records, lo, hi).map_err(run_err)?.gap());
    }
    let ok = worst <= 1e-12;
    all_ok &= ok;
    println!("{} total expectation: max gap {worst:.3e}", verdict(ok));

    if args.trials > 0 && args.predictions.is_none() {
        let config = OracleConfig::new(args.regime.into(), args.n, args.seed);
        let r = concentration_experiment(&config, args.tau, args.epsilon, args.trials)
            .map_err(run_err)?;
        let ok = r.holds(3.0);
        all_ok &= ok;
        println!(
            "{} concentration: frequency {:.4} vs bound {:.4} + 3 x {:.4} (mean n {:.1})",
            verdict(ok),
            r.frequency,
            r.bound,
            r.mc_sigma,
            r.mean_n_selected
        );
    }

    if all_ok {
        Ok(())
    } else {
        Err(run_err("theory checks failed"))
    }
}

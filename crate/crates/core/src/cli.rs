//! The `cflearn` command-line pipeline.
//!
//! Every command reads its inputs from files, writes canonical outputs and
//! maps failures to exit codes: 1 for usage and configuration errors, 2 for
//! I/O errors, 3 for numerical or degenerate-data errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{read_dataset, read_json, read_log, write_dataset, write_json, write_log, write_records};
use crate::data::{Dataset, LogMode, MissingCandidate, Split};
use crate::error::{Error, Result};
use crate::estimators::Objective;
use crate::evaluator::{evaluate_policy, render_report, round2, EvalConfig};
use crate::metrics::ar_test_from_stats;
use crate::policy::GibbsPolicy;
use crate::reward_model::{cross_validate, samples_from_log, ModelKind, RewardModel, RewardModelConfig};
use crate::sim::{generate_task, ground_truth, simulate_log_on, GroundTruth, TaskConfig};
use crate::trainer::{train, OneBestScorer, OptimizerConfig, TrainConfig};

/// Experiment manifest read from a TOML file. Command-line flags override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub reward_model: RewardModelConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = config.seed {
            config.task.seed = seed;
            config.train.seed = seed;
            config.eval.seed = seed;
            config.reward_model.seed = seed;
        }
        Ok(config)
    }

    /// Loads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "cflearn", version, about = "Counterfactual learning from bandit logs")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic task: dataset, oracle and logging policies, ground truth.
    GenTask(GenTaskArgs),
    /// Log one interaction per instance with a policy.
    Log(LogArgs),
    /// Fit a reward model on a log and report cross-validated errors.
    TrainReward(TrainRewardArgs),
    /// Learn a policy from a log.
    Train(TrainArgs),
    /// Estimate a target policy's expected reward from stochastic logs.
    Evaluate(EvaluateArgs),
    /// Compare systems by one-best corpus BLEU with significance tests.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenTaskArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Deterministic,
    Stochastic,
}

impl From<ModeArg> for LogMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Deterministic => LogMode::Deterministic,
            ModeArg::Stochastic => LogMode::Stochastic,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct LogArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Forest,
    Ridge,
}

#[derive(Debug, Args)]
struct TrainRewardArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cross-validation folds; 0 skips cross-validation.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Where to write the cross-validation report as JSON.
    #[arg(long)]
    cv_out: Option<PathBuf>,
    /// Drop log entries whose candidate is missing instead of failing.
    #[arg(long)]
    skip_missing: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Starting policy (usually the logging policy).
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    reward_model: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Use SGD with this learning rate.
    #[arg(long, conflicts_with = "adadelta")]
    learning_rate: Option<f64>,
    /// Use Adadelta (rho 0.95, epsilon 1e-6).
    #[arg(long)]
    adadelta: bool,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for policies and telemetry.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    skip_missing: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    logging: PathBuf,
    #[arg(long)]
    reward_model: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    eval_log_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// A compared system as `NAME=POLICY_PATH`; repeatable.
    #[arg(long = "system", value_parser = parse_system)]
    systems: Vec<(String, PathBuf)>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the rows as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_system(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

/// Runs the CLI on the process arguments and returns the exit code.
pub fn main() -> i32 {
    run_with_args(std::env::args_os())
}

pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // fails only if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenTask(a) => gen_task(a),
        Command::Log(a) => log(a),
        Command::TrainReward(a) => train_reward(a),
        Command::Train(a) => train_policy(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn read_policy(path: &Path) -> Result<GibbsPolicy> {
    let p: GibbsPolicy = read_json(path)?;
    p.validate()?;
    Ok(p)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct PolicyTruth {
    train: GroundTruth,
    validation: GroundTruth,
    test: GroundTruth,
}

impl PolicyTruth {
    fn new(policy: &GibbsPolicy, dataset: &Dataset) -> Result<Self> {
        Ok(Self {
            train: ground_truth(policy, dataset, Split::Train)?,
            validation: ground_truth(policy, dataset, Split::Validation)?,
            test: ground_truth(policy, dataset, Split::Test)?,
        })
    }
}

#[derive(Debug, Serialize)]
struct TaskSummary {
    seed: u64,
    oracle: PolicyTruth,
    logging: PolicyTruth,
}

fn gen_task(a: GenTaskArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.task.seed = seed;
    }
    let task = generate_task(&config.task)?;
    let summary = TaskSummary {
        seed: task.seed,
        oracle: PolicyTruth::new(&task.oracle, &task.dataset)?,
        logging: PolicyTruth::new(&task.logging, &task.dataset)?,
    };
    create_dir(&a.out)?;
    write_dataset(&task.dataset, &a.out.join("dataset.jsonl"))?;
    write_json(&a.out.join("oracle_policy.json"), &task.oracle)?;
    write_json(&a.out.join("logging_policy.json"), &task.logging)?;
    write_json(&a.out.join("ground_truth.json"), &summary)?;
    println!(
        "task seed {}: {} instances, oracle expected reward {:.4}, logging expected reward {:.4} (train)",
        task.seed,
        task.dataset.len(),
        summary.oracle.train.expected_reward,
        summary.logging.train.expected_reward
    );
    Ok(())
}

fn log(a: LogArgs) -> Result<()> {
    let dataset = read_dataset(&a.dataset)?;
    let policy = read_policy(&a.policy)?;
    let split: Split = a.split.into();
    let entries = simulate_log_on(&policy, dataset.split(split), a.mode.into(), a.seed)?;
    if entries.is_empty() {
        return Err(Error::Empty("log"));
    }
    write_log(&entries, &a.out)?;
    let n = entries.len() as f64;
    let mean_reward = crate::numeric::mean(&entries.iter().map(|e| e.reward).collect::<Vec<_>>());
    let unit = entries.iter().filter(|e| e.propensity == 1.0).count() as f64;
    println!(
        "entries {}, mean reward {:.6}, propensity=1.0 for {:.2}% of entries",
        entries.len(),
        mean_reward,
        100.0 * unit / n
    );
    Ok(())
}

fn train_reward(a: TrainRewardArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(a.config.as_deref())?.reward_model;
    if let Some(k) = a.kind {
        config.kind = match k {
            KindArg::Forest => ModelKind::Forest,
            KindArg::Ridge => ModelKind::Ridge,
        };
    }
    if let Some(t) = a.trees {
        config.trees = t;
    }
    if let Some(l) = a.lambda {
        config.lambda = l;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let dataset = read_dataset(&a.dataset)?;
    let log = read_log(&a.log, &dataset, missing_policy(a.skip_missing))?;
    let samples = samples_from_log(&log.entries, &dataset)?;
    if a.folds > 0 {
        let report = cross_validate(&config, &samples, a.folds, config.seed)?;
        println!(
            "{}-fold cross-validation: macro {:.2}, micro {:.2} (x100)",
            a.folds,
            round2(report.macro_avg * 100.0),
            round2(report.micro_avg * 100.0)
        );
        if let Some(path) = &a.cv_out {
            write_json(path, &report)?;
        }
    }
    let model = RewardModel::fit(&config, &samples)?;
    write_json(&a.out, &model)?;
    println!("fitted on {} samples ({} skipped)", samples.len(), log.skipped);
    Ok(())
}

fn missing_policy(skip: bool) -> MissingCandidate {
    if skip {
        MissingCandidate::Skip
    } else {
        MissingCandidate::Error
    }
}

fn train_policy(a: TrainArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(a.config.as_deref())?.train;
    if let Some(o) = a.objective {
        config.objective = o;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        config.optimizer = OptimizerConfig::sgd(lr);
    }
    if a.adadelta {
        config.optimizer = OptimizerConfig::adadelta();
    }
    if let Some(e) = a.eval_every {
        config.eval_every = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let dataset = read_dataset(&a.dataset)?;
    let log = read_log(&a.log, &dataset, missing_policy(a.skip_missing))?;
    let init = read_policy(&a.init)?;
    let model: Option<RewardModel> = a.reward_model.as_deref().map(read_json).transpose()?;
    let trajectory = train(
        &log.entries,
        &dataset,
        &init,
        &config,
        model.as_ref().map(|m| m as &dyn crate::reward_model::RewardPredictor),
    )?;
    create_dir(&a.out)?;
    write_json(&a.out.join("best_policy.json"), &trajectory.best_policy)?;
    write_json(&a.out.join("last_policy.json"), &trajectory.last_policy)?;
    write_records(&a.out.join("telemetry.jsonl"), &trajectory.records)?;
    let best = trajectory.best();
    println!(
        "{}: best checkpoint {} of {} (batch {}), validation BLEU {}",
        config.objective.label(log.entries[0].mode),
        trajectory.best_checkpoint,
        trajectory.records.len(),
        best.batch,
        best.validation_bleu
            .map_or_else(|| "n/a".to_string(), |b| format!("{:.2}", round2(b * 100.0)))
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(a.config.as_deref())?.eval;
    if let Some(f) = a.folds {
        config.folds = f;
    }
    if let Some(n) = a.eval_log_size {
        config.eval_log_size = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let dataset = read_dataset(&a.dataset)?;
    let target = read_policy(&a.target)?;
    let logging = read_policy(&a.logging)?;
    let model: RewardModel = read_json(&a.reward_model)?;
    let report = evaluate_policy(&target, &logging, &dataset, &model, &config)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let (_, table) = render_report(&report);
    print!("{table}");
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(())
}

/// One row of a system comparison, BLEU on the ×100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system: String,
    pub bleu: f64,
    /// Difference to the baseline; absent for the baseline itself.
    pub delta: Option<f64>,
    pub p_value: Option<f64>,
}

fn report(a: ReportArgs) -> Result<()> {
    let dataset = read_dataset(&a.dataset)?;
    let split: Split = a.split.into();
    let scorer = OneBestScorer::for_split(&dataset, split)?;
    let baseline = read_policy(&a.baseline)?;
    let base_stats = scorer.segment_stats(&baseline)?;
    let base_bleu = scorer.score(&baseline)?;
    let mut rows = vec![ComparisonRow {
        system: "baseline".into(),
        bleu: round2(base_bleu * 100.0),
        delta: None,
        p_value: None,
    }];
    let mut names = BTreeMap::new();
    for (name, path) in &a.systems {
        if names.insert(name.clone(), ()).is_some() {
            return Err(Error::Config(format!("system {name} listed twice")));
        }
        let policy = read_policy(path)?;
        let bleu = scorer.score(&policy)?;
        let test = ar_test_from_stats(&scorer.segment_stats(&policy)?, &base_stats, a.iterations, a.seed);
        rows.push(ComparisonRow {
            system: name.clone(),
            bleu: round2(bleu * 100.0),
            delta: Some(round2((bleu - base_bleu) * 100.0)),
            p_value: Some(test.p_value),
        });
    }
    if let Some(path) = &a.oracle {
        let bleu = scorer.score(&read_policy(path)?)?;
        rows.push(ComparisonRow {
            system: "oracle".into(),
            bleu: round2(bleu * 100.0),
            delta: Some(round2((bleu - base_bleu) * 100.0)),
            p_value: None,
        });
    }
    println!("{:<16}{:>8}{:>9}{:>8}", "system", "BLEU", "ΔBLEU", "p");
    for r in &rows {
        let delta = r.delta.map_or(String::new(), |d| format!("{d:+.2}"));
        let p = r.p_value.map_or(String::new(), |p| format!("{p:.3}"));
        println!("{:<16}{:>8.2}{:>9}{:>8}", r.system, r.bleu, delta, p);
    }
    if let Some(path) = &a.out {
        write_records(path, &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_seed_overrides_sections() {
        let c = ExperimentConfig::from_toml("seed = 7\n[task]\nnum_train = 10\n").unwrap();
        assert_eq!(c.task.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.eval.seed, 7);
        assert_eq!(c.reward_model.seed, 7);
        assert_eq!(c.task.num_train, 10);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        for section in ["task", "train", "eval", "reward_model"] {
            let text = format!("[{section}]\nbogus = 1\n");
            assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))), "{section}");
        }
    }

    #[test]
    fn missing_config_is_exit_one() {
        let err = ExperimentConfig::load(Some(Path::new("/nonexistent/cfg.toml"))).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }

    #[test]
    fn usage_errors_are_exit_one() {
        assert_eq!(run_with_args(["cflearn", "no-such-command"]), 1);
        assert_eq!(run_with_args(["cflearn", "log", "--mode", "sideways"]), 1);
        assert_eq!(run_with_args(["cflearn", "--help"]), 0);
        assert_eq!(run_with_args(["cflearn"]), 1);
    }

    #[test]
    fn system_argument_syntax() {
        assert_eq!(parse_system("dc=a/b.json").unwrap(), ("dc".into(), PathBuf::from("a/b.json")));
        assert!(parse_system("nameonly").is_err());
        assert!(parse_system("=x").is_err());
    }
}

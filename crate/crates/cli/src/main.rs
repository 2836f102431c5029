//! Command-line driver: generate synthetic tasks, train and adapt
//! projection heads, evaluate saved heads, run multi-arm experiments and
//! ablation sweeps, and execute the property suite.
//!
//! Every subcommand takes `--config <file>` (JSON whose keys mirror the
//! library config types) and `--seed <int>` (overriding the corresponding
//! seed in the config, so sweeps over seeds never need edited files).
//!
//! Exit codes: 0 success; 1 configuration or I/O error; 2 property-check
//! failure; 3 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use combiloss::data::{generate_task, FewShotTask, SyntheticTaskSpec};
use combiloss::error::{Error, Result};
use combiloss::experiment::{curve_table, run_experiment, AblateConfig, ExperimentConfig};
use combiloss::head::ProjectionHead;
use combiloss::metrics::{cluster_stats, confusion_from_head, ClusterStats, ConfusionMatrix};
use combiloss::propsuite::run_property_suite;
use combiloss::train::{adaptation_pool, base_train, few_shot_adapt, Stage, TrainConfig};

#[derive(Parser)]
#[command(
    name = "combiloss",
    version,
    about = "Combinatorial-information losses and a few-shot adaptation harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic task and save it as a binary file.
    GenData(GenDataArgs),
    /// Base stage: train a fresh head on the abundant base split.
    Train(JobArgs),
    /// Few-shot stage: adapt a saved head on the K-shot pool.
    Adapt(JobArgs),
    /// Score a saved head: confusion, accuracies, cluster statistics.
    Eval(JobArgs),
    /// Run every arm of a multi-arm experiment config.
    Experiment(JobArgs),
    /// Run the exhaustive and randomized property suite.
    Check(CheckArgs),
    /// Expand a sweep (eta / lambda / kernel / component) into an experiment.
    Ablate(JobArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task spec (JSON, keys of the synthetic task type).
    #[arg(long)]
    config: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the task file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct JobArgs {
    /// Job config (JSON); see the README for the key set per subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed(s).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckArgs {
    /// Optional config: {"seed": <int>, "report_out": <path>}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the randomized checks (default 0).
    #[arg(long)]
    seed: Option<u64>,
}

/// Task input shared by the train/adapt/eval job configs: either an inline
/// spec (regenerated from its seed) or a previously saved task file.
#[derive(Deserialize)]
struct TaskSource {
    #[serde(default)]
    task: Option<SyntheticTaskSpec>,
    #[serde(default)]
    task_file: Option<PathBuf>,
}

impl TaskSource {
    fn resolve(&self) -> Result<FewShotTask> {
        match (&self.task, &self.task_file) {
            (Some(spec), None) => generate_task(spec),
            (None, Some(path)) => FewShotTask::load(path),
            (Some(_), Some(_)) => Err(Error::Config(
                "give either task or task_file, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "the config needs a task (inline spec) or a task_file".into(),
            )),
        }
    }
}

#[derive(Deserialize)]
struct TrainJobConfig {
    #[serde(flatten)]
    source: TaskSource,
    train: TrainConfig,
    /// Where the trained weights go.
    head_out: PathBuf,
    /// Adapt only: the base-trained weights to start from.
    #[serde(default)]
    head_in: Option<PathBuf>,
    /// Optional per-evaluation curve table.
    #[serde(default)]
    curve_out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct EvalJobConfig {
    #[serde(flatten)]
    source: TaskSource,
    head_in: PathBuf,
    /// Which prototype pool to score against: the abundant base split or
    /// the K-shot adaptation pool.
    pool: Stage,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    abundant_base: bool,
    #[serde(default)]
    report_out: Option<PathBuf>,
}

/// What `eval` reports for a saved head. Curves and convergence need a
/// training log and so only appear in experiment reports.
#[derive(Serialize)]
struct EvalReport {
    base_accuracy: f64,
    novel_accuracy: f64,
    combined_score: f64,
    confusion: ConfusionMatrix,
    cross_group_confusion: f64,
    cluster_stats: ClusterStats,
}

#[derive(Deserialize)]
struct CheckConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    report_out: Option<PathBuf>,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec: SyntheticTaskSpec = load_json(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let task = generate_task(&spec)?;
    task.save(&args.out)?;
    println!(
        "wrote task {} (base rows = {}, novel rows = {}, test rows = {}, seed = {})",
        args.out.display(),
        task.base().len(),
        task.novel().len(),
        task.test().len(),
        spec.seed
    );
    Ok(())
}

fn train(args: &JobArgs) -> Result<()> {
    let mut cfg: TrainJobConfig = load_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if cfg.train.stage != Stage::Base {
        return Err(Error::Config(
            "the train subcommand runs the base stage; set train.stage = \"base\"".into(),
        ));
    }
    if cfg.head_in.is_some() {
        return Err(Error::Config(
            "head_in belongs to the adapt subcommand; the base stage starts fresh".into(),
        ));
    }
    let task = cfg.source.resolve()?;
    let head0 = ProjectionHead::init(task.spec.input_dim, task.spec.embed_dim, cfg.train.seed)?;
    let (head, log) = base_train(&task, &head0, &cfg.train)?;
    head.save(&cfg.head_out)?;
    if let Some(curve) = &cfg.curve_out {
        std::fs::write(curve, curve_table(&log))?;
    }
    let last = log.final_record().expect("log has records");
    println!(
        "base stage done: {} iterations, base accuracy {:.4}; head -> {}",
        log.iterations,
        last.base_accuracy,
        cfg.head_out.display()
    );
    Ok(())
}

fn adapt(args: &JobArgs) -> Result<()> {
    let mut cfg: TrainJobConfig = load_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if cfg.train.stage != Stage::Adapt {
        return Err(Error::Config(
            "the adapt subcommand runs the few-shot stage; set train.stage = \"adapt\"".into(),
        ));
    }
    let head_in = cfg
        .head_in
        .as_ref()
        .ok_or_else(|| Error::Config("adapt needs head_in, the base-trained weights".into()))?;
    let task = cfg.source.resolve()?;
    let head0 = ProjectionHead::load(head_in)?;
    let (head, log) = few_shot_adapt(&task, &head0, &cfg.train)?;
    head.save(&cfg.head_out)?;
    if let Some(curve) = &cfg.curve_out {
        std::fs::write(curve, curve_table(&log))?;
    }
    let last = log.final_record().expect("log has records");
    println!(
        "adaptation done: {} iterations, base accuracy {:.4}, novel accuracy {:.4}; head -> {}",
        log.iterations,
        last.base_accuracy,
        last.novel_accuracy.unwrap_or(0.0),
        cfg.head_out.display()
    );
    Ok(())
}

fn eval(args: &JobArgs) -> Result<()> {
    let mut cfg: EvalJobConfig = load_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let task = cfg.source.resolve()?;
    let head = ProjectionHead::load(&cfg.head_in)?;
    let pool = match cfg.pool {
        Stage::Base => task.base().clone(),
        Stage::Adapt => adaptation_pool(&task, cfg.seed, cfg.abundant_base)?,
    };
    let confusion = confusion_from_head(&head, &pool, task.test())?;
    let novel: std::collections::BTreeSet<usize> = task.spec.novel_class_ids().collect();
    let base: std::collections::BTreeSet<usize> = task.spec.base_class_ids().collect();
    let report = EvalReport {
        base_accuracy: confusion.group_accuracy(&base),
        novel_accuracy: confusion.group_accuracy(&novel),
        combined_score: 0.5 * (confusion.group_accuracy(&base) + confusion.group_accuracy(&novel)),
        cross_group_confusion: confusion.cross_group_mass(&novel),
        cluster_stats: cluster_stats(&head, &pool, &novel)?,
        confusion,
    };
    println!(
        "eval ({} pool): base accuracy {:.4}, novel accuracy {:.4}, \
         base-novel confusion mass {:.4}",
        match cfg.pool {
            Stage::Base => "base",
            Stage::Adapt => "adapt",
        },
        report.base_accuracy,
        report.novel_accuracy,
        report.cross_group_confusion
    );
    if let Some(path) = &cfg.report_out {
        write_json(path, &report)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn reseed_experiment(cfg: &mut ExperimentConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.task.seed = s;
        cfg.base.seed = s;
        cfg.adapt.seed = s;
    }
}

fn print_experiment(outcome: &combiloss::experiment::ExperimentOutcome, dir: &Path) {
    for arm in &outcome.arms {
        match (&arm.report, &arm.error) {
            (Some(r), _) => println!(
                "arm {}: base {:.4}, novel {:.4}, combined {:.4}, forgetting {:+.4}, \
                 convergence {}",
                arm.name,
                r.base_accuracy,
                r.novel_accuracy,
                r.combined_score,
                r.forgetting_delta,
                r.convergence_iters
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "undefined".into()),
            ),
            (None, Some(e)) => println!("arm {}: FAILED — {e}", arm.name),
            (None, None) => println!("arm {}: FAILED — unknown error", arm.name),
        }
    }
    println!("reports -> {}", dir.display());
}

fn experiment(args: &JobArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_json(&args.config)?;
    reseed_experiment(&mut cfg, args.seed);
    let outcome = run_experiment(&cfg)?;
    print_experiment(&outcome, &cfg.output_dir);
    Ok(())
}

fn ablate(args: &JobArgs) -> Result<()> {
    let ab: AblateConfig = load_json(&args.config)?;
    let mut cfg = ab.into_experiment();
    reseed_experiment(&mut cfg, args.seed);
    let outcome = run_experiment(&cfg)?;
    print_experiment(&outcome, &cfg.output_dir);
    Ok(())
}

fn check(args: &CheckArgs) -> Result<ExitCode> {
    let cfg: CheckConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => CheckConfig {
            seed: 0,
            report_out: None,
        },
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    let report = run_property_suite(seed);
    for c in &report.checks {
        println!(
            "{} {} — {} ({} ms)",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail,
            c.millis
        );
    }
    let passed = report.checks.iter().filter(|c| c.pass).count();
    println!(
        "{passed}/{} checks passed in {} ms (seed {seed})",
        report.checks.len(),
        report.total_millis
    );
    if let Some(path) = &cfg.report_out {
        write_json(path, &report)?;
        println!("report -> {}", path.display());
    }
    Ok(if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(a).map(|()| ExitCode::SUCCESS),
        Cmd::Train(a) => train(a).map(|()| ExitCode::SUCCESS),
        Cmd::Adapt(a) => adapt(a).map(|()| ExitCode::SUCCESS),
        Cmd::Eval(a) => eval(a).map(|()| ExitCode::SUCCESS),
        Cmd::Experiment(a) => experiment(a).map(|()| ExitCode::SUCCESS),
        Cmd::Check(a) => check(a),
        Cmd::Ablate(a) => ablate(a).map(|()| ExitCode::SUCCESS),
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a usage
            // error, reported with the config-error exit code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

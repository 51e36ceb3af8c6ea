//! Command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{config_hash, run_sweep, MethodSpec, SweepSpec};
use crate::error::{Error, Result};
use crate::filter::{bootstrap_filter, FilterResult};
use crate::gradcheck;
use crate::neuralnet::Checkpoint;
use crate::rng;
use crate::ssm::{simulate, Lorenz96Config, ModelConfig, StateSpaceModel, Trajectory};
use crate::training::{LearnedModel, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "statemix", version, about = "Particle filters with learned mixture transitions and proposals")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for evaluation runs (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    /// Trajectory CSV to use instead of simulating one.
    #[arg(long, requires = "sidecar")]
    pub series: Option<PathBuf>,
    /// JSON sidecar belonging to `--series`.
    #[arg(long, requires = "series")]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trajectory and write CSV plus JSON sidecar.
    Simulate,
    /// Train the configured method on one series.
    Train(SeriesArgs),
    /// Filter a series with a checkpoint, or with the bootstrap filter.
    Evaluate {
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Particle count, overriding the configuration.
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Run a full sweep from a sweep spec.
    Sweep,
    /// Run the finite-difference gradient suites.
    Gradcheck,
}

/// Settings shared by `simulate`, `train` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub particles: usize,
    pub method: MethodSpec,
    pub training: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::Lorenz96(Lorenz96Config::default()),
            steps: 30,
            particles: 100,
            method: MethodSpec::StateMixNN { components: 1 },
            training: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(toml::from_str(&std::fs::read_to_string(p)?)?),
            None => Ok(Self::default()),
        }
    }
}

fn load_series(args: &SeriesArgs, model: &StateSpaceModel, steps: usize, seed: u64, tag: &str) -> Result<Trajectory> {
    match (&args.series, &args.sidecar) {
        (Some(csv), Some(side)) => Trajectory::load(csv, side),
        _ => simulate(model, steps, rng::derive_key(seed, &[rng::label(tag)])),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn simulate_cmd(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let model = StateSpaceModel::new(cfg.model, cli.seed)?;
    let tr = simulate(&model, cfg.steps, cli.seed)?;
    let (csv, side) = tr.save(&cli.out, "trajectory")?;
    Ok(json!({ "trajectory": csv, "sidecar": side, "series_hash": tr.series_hash() }))
}

fn train_cmd(cli: &Cli, args: &SeriesArgs) -> Result<serde_json::Value> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let model = StateSpaceModel::new(cfg.model.clone(), cli.seed)?;
    let series = load_series(args, &model, cfg.steps, cli.seed, "train-series")?;
    let model = series.model()?;
    let training = TrainConfig {
        seed: rng::derive_key(cli.seed, &[rng::label("train")]),
        particles: cfg.particles,
        ..cfg.training.clone()
    };
    std::fs::create_dir_all(&cli.out)?;
    let (series_csv, _) = series.save(&cli.out, "train_series")?;
    let with_s = |s: usize| TrainConfig {
        transition_components: s,
        proposal_components: s,
        ..training.clone()
    };
    let learned = match cfg.method {
        MethodSpec::StateMixNN { components } => crate::training::statemixnn_train(&model, &series.observations, &with_s(components), Some(&cli.out))?,
        MethodSpec::PropMixNN { components } => crate::training::propmixnn_train(&model, &series.observations, &with_s(components), Some(&cli.out))?,
        other => return Err(Error::Config(format!("method {} has nothing to train", other.label()))),
    };
    let ckpt = cli.out.join("checkpoint.json");
    learned.checkpoint().save(&ckpt)?;
    let history = cli.out.join("history.csv");
    learned.write_history_csv(&history)?;
    Ok(json!({
        "checkpoint": ckpt,
        "history": history,
        "series": series_csv,
        "updates": learned.update_count(),
        "final_objective": learned.history.last().map(|h| h.objective),
    }))
}

fn evaluate_cmd(cli: &Cli, args: &SeriesArgs, checkpoint: Option<&Path>, particles: Option<usize>) -> Result<serde_json::Value> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let model = StateSpaceModel::new(cfg.model.clone(), cli.seed)?;
    let series = load_series(args, &model, cfg.steps, cli.seed, "eval-series")?;
    let model = series.model()?;
    let k = particles.unwrap_or(cfg.particles);
    let key = rng::derive_key(cli.seed, &[rng::label("evaluate")]);
    let (method, result): (&str, FilterResult) = match checkpoint {
        Some(path) => {
            let learned = LearnedModel::from_checkpoint(&Checkpoint::load(path)?, cfg.training.clone())?;
            let label = if learned.transition.is_some() { "statemixnn" } else { "propmixnn" };
            (label, learned.filter(&model, &series.observations, k, key)?)
        }
        None => ("bpf", bootstrap_filter(&model, &series.observations, k, key)?),
    };
    std::fs::create_dir_all(&cli.out)?;
    if args.series.is_none() {
        series.save(&cli.out, "eval_series")?;
    }
    let csv = cli.out.join("filter.csv");
    result.write_csv(&csv)?;
    let hash = config_hash(&(&cfg, k, method))?;
    let summary = result.summary(Some(&series), model.topology(), &hash, cli.seed)?;
    write_json(&cli.out.join("summary.json"), &summary)?;
    Ok(json!({ "method": method, "filter": csv, "summary": summary }))
}

fn sweep_cmd(cli: &Cli) -> Result<serde_json::Value> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("sweep needs --config <spec.toml>".into()))?;
    let spec = SweepSpec::load(path)?;
    let out = run_sweep(&spec)?;
    std::fs::create_dir_all(&cli.out)?;
    let metrics = cli.out.join("metrics.csv");
    let summary = cli.out.join("summary.csv");
    out.write_metrics_csv(&metrics)?;
    out.write_summary_csv(&summary)?;
    let failures: Vec<_> = out
        .failures
        .iter()
        .map(|(v, m, s, e)| json!({ "swept_value": v, "method": m, "S": s, "error": e }))
        .collect();
    Ok(json!({ "metrics": metrics, "summary": summary, "failures": failures }))
}

fn gradcheck_cmd(cli: &Cli) -> Result<serde_json::Value> {
    let report = gradcheck::run_all(cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("gradcheck.json"), &report)?;
    let suites: Vec<_> = report
        .suites
        .iter()
        .map(|s| json!({ "suite": s.suite, "max_rel_error": s.max_rel_error, "tolerance": s.tolerance, "passed": s.passed }))
        .collect();
    if !report.passed() {
        return Err(Error::contract("gradcheck", format!("suite above tolerance: {}", serde_json::Value::Array(suites))));
    }
    Ok(json!({ "passed": true, "suites": suites }))
}

pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, which is fine to keep
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate => simulate_cmd(cli),
        Command::Train(args) => train_cmd(cli, args),
        Command::Evaluate {
            series,
            checkpoint,
            particles,
        } => evaluate_cmd(cli, series, checkpoint.as_deref(), *particles),
        Command::Sweep => sweep_cmd(cli),
        Command::Gradcheck => gradcheck_cmd(cli),
    }
}

/// Parses arguments, runs the command, prints a JSON report on stdout or a
/// JSON error on stderr.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}

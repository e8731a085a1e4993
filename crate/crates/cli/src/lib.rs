//! Command-line driver: `train`, `unlearn`, `baseline`, `compare` and
//! `gradcheck`.

pub mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedunlearn_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use fedunlearn_core::config::{ConfigError, ExperimentConfig};
use fedunlearn_core::experiment::{compare_reports, unix_ms, write_round_log, Experiment, Method, RunReport};
use fedunlearn_core::federated::ServerState;
use fedunlearn_core::metrics::MetricReport;
use fedunlearn_core::Error;
use log::info;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "fedunlearn", version, about = "Federated unlearning by rapid retraining")]
pub struct Cli {
    /// Directory for checkpoints and reports.
    #[arg(long, global = true, env = "FEDUNLEARN_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override a named seed, e.g. `--seed-override deletion=7`.
    #[arg(long = "seed-override", global = true, value_name = "NAME=INT")]
    pub seed_overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Federated training on the full data; writes a checkpoint and a report.
    Train(ConfigArg),
    /// Delete the configured data and retrain.
    Unlearn(UnlearnArgs),
    /// Same as `unlearn --method baseline`.
    Baseline(CheckpointArgs),
    /// Compare two retraining reports.
    Compare(CompareArgs),
    /// Check analytic gradients and Fisher diagonals against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct UnlearnArgs {
    #[command(flatten)]
    pub inputs: CheckpointArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Fim)]
    pub method: MethodArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Fim,
    Baseline,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fim => Method::Fim,
            MethodArg::Baseline => Method::Baseline,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub report_a: PathBuf,
    pub report_b: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Test hook: add 1e-3 to this analytic gradient coordinate.
    #[arg(long, hide = true)]
    pub inject_gradient_fault: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Provenance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Provenance(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::Numerical(_) => CliError::Numerical(e.to_string()),
            Error::Provenance(_) => CliError::Provenance(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Files written by a command, plus the comparison or gradcheck result.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub metrics: Option<MetricReport>,
    pub gradcheck: Option<gradcheck::GradcheckReport>,
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json_str(&text)?;
    config.apply_seed_overrides(overrides)?;
    Ok(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&a.config, cli),
        Command::Unlearn(a) => cmd_unlearn(&a.inputs, a.method.into(), cli),
        Command::Baseline(a) => cmd_unlearn(a, Method::Baseline, cli),
        Command::Compare(a) => cmd_compare(&a.report_a, &a.report_b, cli),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli),
    }
}

fn cmd_train(config_path: &Path, cli: &Cli) -> Result<Outcome, CliError> {
    let config = load_config(config_path, &cli.seed_overrides)?;
    let started = unix_ms();
    let exp = Experiment::load(config)?;
    let run = exp.train()?;
    let report = exp.train_report(&run, started)?;
    let header = CheckpointHeader::new(
        exp.config.training_hash(),
        exp.dataset_hash.clone(),
        exp.config.model.clone(),
    );
    let ckpt = cli.out_dir.join("train.ckpt");
    let report_path = cli.out_dir.join("train.report.json");
    let log_path = cli.out_dir.join("train.rounds.csv");
    write_checkpoint(&ckpt, &header, &run.server.global_params)?;
    report.write(&report_path)?;
    write_round_log(&log_path, &run.rounds)?;
    info!("trained {} rounds; checkpoint at {}", run.rounds.len(), ckpt.display());
    Ok(Outcome {
        written: vec![ckpt, report_path, log_path],
        ..Outcome::default()
    })
}

fn cmd_unlearn(args: &CheckpointArgs, method: Method, cli: &Cli) -> Result<Outcome, CliError> {
    let config = load_config(&args.config, &cli.seed_overrides)?;
    let started = unix_ms();
    let (header, params) = read_checkpoint(&args.checkpoint)?;
    if header.config_hash != config.training_hash() {
        return Err(CliError::Provenance(format!(
            "checkpoint {} was trained under config hash {}, but this config hashes to {}",
            args.checkpoint.display(),
            header.config_hash,
            config.training_hash()
        )));
    }
    let exp = Experiment::load(config)?;
    if header.dataset_hash != exp.dataset_hash {
        return Err(CliError::Provenance(format!(
            "checkpoint dataset hash {} does not match the loaded data ({})",
            header.dataset_hash, exp.dataset_hash
        )));
    }
    let trained = ServerState {
        global_params: params,
        weights: Vec::new(),
        round: 0,
    };
    let run = exp.unlearn(method, &trained)?;
    let report = exp.unlearn_report(&run, started)?;
    let stem = match method {
        Method::Fim => "unlearn-fim",
        Method::Baseline => "unlearn-baseline",
    };
    let report_path = cli.out_dir.join(format!("{stem}.report.json"));
    let log_path = cli.out_dir.join(format!("{stem}.rounds.csv"));
    report.write(&report_path)?;
    write_round_log(&log_path, &report.rounds)?;
    Ok(Outcome {
        written: vec![report_path, log_path],
        ..Outcome::default()
    })
}

fn cmd_compare(a: &Path, b: &Path, cli: &Cli) -> Result<Outcome, CliError> {
    let ra = RunReport::read(a)?;
    let rb = RunReport::read(b)?;
    // probes come from the data the reports were produced on
    let exp = Experiment::load(ra.config.clone())?;
    if exp.dataset_hash != ra.provenance.dataset_hash {
        return Err(CliError::Provenance(format!(
            "data referenced by {} has changed since the run",
            a.display()
        )));
    }
    let metrics = compare_reports(&ra, &rb, exp.eval_set())?;
    let path = cli.out_dir.join("compare.json");
    write_json(&path, &metrics)?;
    Ok(Outcome {
        written: vec![path],
        metrics: Some(metrics),
        gradcheck: None,
    })
}

fn cmd_gradcheck(args: &GradcheckArgs, cli: &Cli) -> Result<Outcome, CliError> {
    let config = load_config(&args.config, &cli.seed_overrides)?;
    let fault = args.inject_gradient_fault.map(|coordinate| gradcheck::Fault {
        coordinate,
        amount: 1e-3,
    });
    let report = gradcheck::run(&config.model, config.seeds.init, fault)?;
    let path = cli.out_dir.join("gradcheck.json");
    write_json(&path, &report)?;
    let outcome = Outcome {
        written: vec![path],
        metrics: None,
        gradcheck: Some(report.clone()),
    };
    if report.pass {
        Ok(outcome)
    } else {
        let worst = report
            .models
            .iter()
            .filter(|m| !m.pass)
            .map(|m| {
                format!(
                    "{}: max relative error {:.3e} (worst coordinate {}), fisher diagonal error {:.3e}",
                    m.model, m.max_grad_rel_error, m.worst_coordinate, m.fim_rel_error
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        Err(CliError::Numerical(format!("gradient check failed: {worst}")))
    }
}

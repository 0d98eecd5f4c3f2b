//! `predcode`: runs one experiment per invocation and writes JSON-lines metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use predcode::experiment::{exit_code, run_experiment, ExperimentConfig, ExperimentKind};
use predcode::PcError;

#[derive(Parser)]
#[command(name = "predcode", version, about = "Predictive coding experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and save its parameters.
    Train(RunArgs),
    /// Classify the test set with saved parameters.
    Classify(RunArgs),
    /// Generate observations from labels with saved parameters.
    Generate(RunArgs),
    /// Compare converged linear predictive coding with the Kalman filter.
    KalmanCompare(RunArgs),
    /// Compare relaxed error units with reverse-mode gradients.
    BackpropCompare(RunArgs),
    /// Compare the predictive coding controller with derivative-form PID.
    PidCompare(RunArgs),
    /// Precision fixed points and the Monte-Carlo self-consistency check.
    PrecisionStudy(RunArgs),
    /// Print the default configuration of an experiment kind as TOML.
    Config {
        /// Experiment kind, e.g. `kalman-compare`.
        kind: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; defaults are used for missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics output (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Saved parameters: written by `train`, read by `classify` and `generate`.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, PcError> {
    let mut text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| PcError::Config(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| PcError::Config(e.to_string()))?;
    match table.get("kind").and_then(|k| k.as_str()) {
        Some(found) if found != kind.name() => {
            return Err(PcError::Config(format!("config is for {found:?}, not {:?}", kind.name())));
        }
        Some(_) => {}
        None => text = format!("kind = \"{}\"\n{text}", kind.name()),
    }
    let mut cfg = ExperimentConfig::from_toml_with_overrides(&text, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    if let Some(params) = &args.params {
        cfg.params = Some(params.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<(), PcError> {
    let cfg = load(kind, args)?;
    let summary = run_experiment(&cfg)?;
    if let Some(last) = summary.last() {
        println!("{}: {} = {:e} ({} records)", kind.name(), last.metric, last.task_metric, summary.records.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Classify(a) => (ExperimentKind::Classify, a),
        Command::Generate(a) => (ExperimentKind::Generate, a),
        Command::KalmanCompare(a) => (ExperimentKind::KalmanCompare, a),
        Command::BackpropCompare(a) => (ExperimentKind::BackpropCompare, a),
        Command::PidCompare(a) => (ExperimentKind::PidCompare, a),
        Command::PrecisionStudy(a) => (ExperimentKind::PrecisionStudy, a),
        Command::Config { kind } => {
            return match kind.parse::<ExperimentKind>().and_then(|k| ExperimentConfig::of_kind(k).to_toml()) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use moodshift::pipeline::{run_stage, PipelineConfig, Stage};
use moodshift::Execution;

/// Detect mood-score shifts from wearable data with an LSTM autoencoder.
#[derive(Debug, Parser)]
#[command(name = "moodshift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON pipeline configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding all stage artifacts.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Cohort JSONL to read instead of the simulated one.
    #[arg(long, global = true)]
    cohort: Option<PathBuf>,

    /// Master seed for simulation, training and attribution.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Validation-error percentile used as the detection threshold.
    #[arg(long, global = true)]
    percentile: Option<f64>,

    /// Reject implausible sensor values instead of warning.
    #[arg(long, global = true)]
    strict: bool,

    /// Run on the current thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with ground truth.
    Simulate,
    /// Derive normal periods and episodes from assessments.
    Label,
    /// Extract daily features and build normalized windows.
    Features,
    /// Train the autoencoder on normal windows.
    Train,
    /// Score every window and flag those above the threshold.
    Detect,
    /// Adjusted precision, recall and F, sweeps and aligned averages.
    Evaluate,
    /// Shapley attributions, feature ranks and chi-square tests.
    Explain,
    /// Assemble the report bundle.
    Report,
    /// Run every stage in order.
    All,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::Simulate => vec![Stage::Simulate],
            Command::Label => vec![Stage::Label],
            Command::Features => vec![Stage::Features],
            Command::Train => vec![Stage::Train],
            Command::Detect => vec![Stage::Detect],
            Command::Evaluate => vec![Stage::Evaluate],
            Command::Explain => vec![Stage::Explain],
            Command::Report => vec![Stage::Report],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &cli.workdir {
        cfg.workdir = dir.clone();
    }
    if let Some(cohort) = &cli.cohort {
        cfg.cohort = Some(cohort.clone());
    }
    if let Some(p) = cli.percentile {
        cfg.percentile = p;
    }
    if cli.strict {
        cfg.strict = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    for stage in cli.command.stages() {
        let lines = run_stage(stage, &cfg, exec).with_context(|| format!("stage {} failed", stage.as_str()))?;
        println!("[{}]", stage.as_str());
        for line in lines {
            println!("  {line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

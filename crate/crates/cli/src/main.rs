use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use racnet_cli::commands::Context;
use racnet_cli::config::ExperimentConfig;
use racnet_cli::{execute, Stage};

/// Train a small CNN, attach relevance-based auxiliary cells and evaluate
/// early-exit error detection.
#[derive(Debug, Parser)]
#[command(name = "racnet", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "racnet.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recompute cached artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Evaluate the plain network without auxiliary cells.
    #[arg(long, global = true)]
    baseline_only: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the backbone network.
    Train,
    /// Compute relevance-score matrices at the configured layers.
    Relevance,
    /// Train the auxiliary cells.
    TrainRacs,
    /// Evaluate detection and FLOPs on the test split.
    Eval,
    /// Sweep layer pairs, k and delta_th on the validation split.
    Sweep,
    /// Zero-knowledge (and paired full-knowledge) adversarial evaluation.
    Attack,
    /// Out-of-distribution evaluation.
    Ood,
    /// Every stage in order, with cells chosen by the sweep.
    Pipeline,
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("--threads")?;
    }
    let ctx = Context::new(cfg, cli.force)?;
    let stage = match cli.command {
        Command::Train => Stage::Train,
        Command::Relevance => Stage::Relevance,
        Command::TrainRacs => Stage::TrainRacs,
        Command::Eval => Stage::Eval {
            baseline_only: cli.baseline_only,
        },
        Command::Sweep => Stage::Sweep,
        Command::Attack => Stage::Attack,
        Command::Ood => Stage::Ood,
        Command::Pipeline => Stage::Pipeline,
    };
    execute(&ctx, stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use echoguide_core::pose::ScorerMode;
use echoguide_service::commands;
use echoguide_service::config::RunConfig;
use serde::Serialize;

/// Published end-to-end rate of the original system, for comparison only.
const REFERENCE_FPS: f64 = 14.0;

#[derive(Parser)]
#[command(name = "echoguide", version, about = "Apical 4-chamber guidance: landmarks, pose score and LVEF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the landmark detector; --checkpoint is the output directory.
    TrainLandmarks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a pose scorer for one fold; --checkpoint is the output directory.
    TrainPose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "images_and_landmarks")]
        mode: ScorerMode,
    },
    /// Train the LVEF video regressor; --checkpoint is the output directory.
    TrainLvef {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Landmark pixel error of a detector checkpoint on the test split.
    EvalLandmarks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fold accuracy and confusion matrix of a pose scorer checkpoint.
    EvalPose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ScorerMode>,
    },
    /// Continuous pose scores of every sweep in the configured manifest.
    ScoreSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Run the cascade over recorded frames and print one result per line.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Directory with landmarks/, pose/ and lvef/ checkpoints.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode, default_value = "images_and_landmarks")]
        mode: ScorerMode,
    },
    /// Stream results over TCP, one JSON message per line.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode, default_value = "images_and_landmarks")]
        mode: ScorerMode,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Subject-level five-fold plan.
    Folds {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> Result<ScorerMode, String> {
    s.parse::<ScorerMode>().map_err(|e| e.to_string())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    RunConfig::load(common.config.as_deref()).context("loading --config")
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::TrainLandmarks { common, checkpoint } => {
            let cfg = load(&common)?;
            print_json(&commands::train_landmarks(&cfg, &checkpoint, common.seed)?)
        }
        Command::TrainPose {
            common,
            checkpoint,
            mode,
        } => {
            let cfg = load(&common)?;
            print_json(&commands::train_pose(&cfg, mode, &checkpoint, common.seed)?)
        }
        Command::TrainLvef { common, checkpoint } => {
            let cfg = load(&common)?;
            print_json(&commands::train_lvef(&cfg, &checkpoint, common.seed)?)
        }
        Command::EvalLandmarks { common, checkpoint } => {
            let cfg = load(&common)?;
            print_json(&commands::eval_landmarks(&cfg, &checkpoint, common.seed)?)
        }
        Command::EvalPose {
            common,
            checkpoint,
            mode,
        } => {
            let cfg = load(&common)?;
            print_json(&commands::eval_pose(&cfg, &checkpoint, mode, common.seed)?)
        }
        Command::ScoreSweep { common } => print_json(&commands::score_sweep(&load(&common)?)?),
        Command::Folds { common } => print_json(&commands::folds(&load(&common)?, common.seed)?),
        Command::Infer {
            common,
            checkpoint,
            mode,
        } => {
            let cfg = load(&common)?;
            let stdout = std::io::stdout();
            let stats = commands::infer(&cfg, checkpoint.as_deref(), mode, common.seed, &mut stdout.lock())?;
            eprintln!(
                "{} frames in {:.2} s: {:.1} fps (reference {REFERENCE_FPS} fps)",
                stats.frames_processed, stats.elapsed_seconds, stats.fps
            );
            Ok(())
        }
        Command::Serve {
            common,
            checkpoint,
            mode,
            port,
        } => {
            let cfg = load(&common)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(commands::serve(&cfg, checkpoint.as_deref(), mode, port, common.seed))?;
            Ok(())
        }
    }
}

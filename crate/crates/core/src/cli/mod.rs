//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage run out of order,
//! 4 numeric failure, 1 anything else.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::pipeline::Mode;
use crate::training::Stage;
use commands::Workspace;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "geco", version, about = "Speech separation with a bridge-diffusion corrector")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override a config value, e.g. `--set bridge.steps=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/val/test mixtures.
    Simulate,
    /// Train the separator.
    TrainSep(TrainArgs),
    /// Train the score model by denoising score matching.
    TrainGeco(TrainArgs),
    /// Fine-tune the score model for single-step correction.
    Finetune(TrainArgs),
    /// Separate one mixture WAV.
    Separate {
        input: PathBuf,
        #[arg(long, default_value = "fastgeco", value_parser = parse_mode)]
        mode: Mode,
        /// Directory holding the checkpoints (default: --out).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Evaluate SI-SNRi on a manifest (default: the simulated test split).
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "fastgeco", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Write the log-magnitude spectrogram of a WAV as CSV.
    Spectrogram { input: PathBuf },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Directory with the split manifests (default: <out>/data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from the stage's existing checkpoint.
    #[arg(long)]
    pub resume: bool,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Exists(_) => 2,
        Error::Ordering { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

/// Runs a parsed command line; returns a one-line summary.
pub fn execute(cli: Cli) -> Result<String> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    let ws = Workspace {
        cfg,
        out: cli.out,
        force: cli.force,
    };
    let train = |stage: Stage, a: &TrainArgs| {
        commands::cmd_train(&ws, stage, a.data.as_deref(), a.resume).map(|p| format!("wrote {}", p.display()))
    };
    match &cli.command {
        Command::Simulate => {
            let m = commands::cmd_simulate(&ws)?;
            Ok(format!("wrote {} manifests under {}", m.len(), ws.data_dir().display()))
        }
        Command::TrainSep(a) => train(Stage::Separator, a),
        Command::TrainGeco(a) => train(Stage::Geco, a),
        Command::Finetune(a) => train(Stage::Finetune, a),
        Command::Separate { input, mode, models } => {
            let paths = commands::cmd_separate(&ws, input, *mode, models.as_deref())?;
            Ok(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n"))
        }
        Command::Eval { manifest, mode, models } => {
            let (path, s) = commands::cmd_eval(&ws, manifest.as_deref(), *mode, models.as_deref())?;
            Ok(format!(
                "{mode}: SI-SNRi {:.2} ± {:.2} dB over {} sources -> {}",
                s.si_snri_mean,
                s.si_snri_std,
                s.rows,
                path.display()
            ))
        }
        Command::Spectrogram { input } => {
            commands::cmd_spectrogram(&ws, input).map(|p| format!("wrote {}", p.display()))
        }
    }
}

/// Parses `std::env::args`, runs, prints, and returns the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

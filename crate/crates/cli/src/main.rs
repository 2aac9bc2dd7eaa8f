use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pddpm_cli::commands;
use pddpm_cli::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "pddpm", version, about = "Patched diffusion models for unsupervised anomaly detection")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Phantoms {
        /// Target directory.
        dir: PathBuf,
    },
    /// Train a denoiser on the healthy training subjects.
    Train {
        /// Continue from a `last.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Search a threshold on the validation subjects and score the test subjects.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep patch sizes and test noise levels.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render one slice at t = 0, 100, ..., 1000.
    NoiseViz,
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::resolve(&cli.overrides)?;
    let out = &cli.overrides.out;
    match cli.command {
        Command::Phantoms { dir } => {
            let manifest = commands::cmd_phantoms(&config, &dir)?;
            println!("{}", manifest.display());
        }
        Command::Train { resume } => {
            let dir = commands::cmd_train(&config, out, resume.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Evaluate { checkpoint } => {
            let (dir, _) = commands::cmd_evaluate(&config, out, checkpoint.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Ablate { checkpoint } => {
            let (dir, _) = commands::cmd_ablate(&config, out, checkpoint.as_deref())?;
            println!("{}", dir.display());
        }
        Command::NoiseViz => {
            let dir = commands::cmd_noise_viz(&config, out)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

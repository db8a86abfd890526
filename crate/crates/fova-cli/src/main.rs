use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fova_cli::commands::{cmd_audit, cmd_generate, cmd_report, cmd_train};
use fova_cli::config::parse_config;
use fova_core::error::Error;
use fova_core::federation::Algo;

/// Offline federated RL simulator: vote-based conservative Q-learning with
/// advantage-weighted improvement on tabular MDPs, plus bound audits.
#[derive(Parser)]
#[command(name = "fova", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the MDP document and per-seed dataset files.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on generated data, one metrics CSV and checkpoint per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's algorithm tag.
        #[arg(long)]
        algo: Option<String>,
        /// Override the config's round count.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Compute bound reports for a trained checkpoint.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate per-seed metrics into mean/std curves and a summary table.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out } => {
            let config = parse_config(&read(&config)?)?;
            cmd_generate(&config, &out)?;
        }
        Command::Train {
            config,
            out,
            algo,
            rounds,
        } => {
            let config = parse_config(&read(&config)?)?;
            let algo = algo.map(|tag| Algo::from_tag(&tag)).transpose()?;
            cmd_train(&config, &out, algo, rounds)?;
        }
        Command::Audit {
            config,
            out,
            checkpoint,
        } => {
            let config = parse_config(&read(&config)?)?;
            cmd_audit(&config, &out, &checkpoint)?;
        }
        Command::Report { config, out } => {
            let config = parse_config(&read(&config)?)?;
            config.validate()?;
            cmd_report(&out)?;
        }
    }
    Ok(())
}

fn read(path: &PathBuf) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

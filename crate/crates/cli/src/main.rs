use std::path::PathBuf;
use std::process::ExitCode;

use anadp_cli::config::{parse_mode, ExperimentConfig};
use anadp_cli::runner;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "anadp",
    version,
    about = "Differentially private training with adaptive noise allocation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run record.
    Train(RunArgs),
    /// Print the noise multiplier calibrated to the configured budget.
    Calibrate(RunArgs),
    /// Train, rank the canary candidates, and report exposure.
    Exposure(RunArgs),
    /// Train every (mode, seed) cell and compare paired accuracies.
    Compare(RunArgs),
    /// Write per-group noise standard deviations over the training steps.
    Heatmap(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for result artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training mode: non_private, dp_uniform, or anadp.
    #[arg(long)]
    mode: Option<String>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<String> {
    let (command, args) = match cli.command {
        Command::Train(args) => (runner::Command::Train, args),
        Command::Calibrate(args) => (runner::Command::Calibrate, args),
        Command::Exposure(args) => (runner::Command::Exposure, args),
        Command::Compare(args) => (runner::Command::Compare, args),
        Command::Heatmap(args) => (runner::Command::Heatmap, args),
    };
    let mode = args.mode.as_deref().map(parse_mode).transpose()?;
    let cfg = ExperimentConfig::load(&args.config, args.seed, mode)?;
    let output = runner::run(command, &cfg, &args.out)?;
    let files: Vec<String> =
        output.files.iter().map(|p| p.display().to_string()).collect();
    Ok(format!("{}\nwrote {}", output.summary, files.join(", ")))
}

//! `idt`: collect learning histories, train, evaluate, benchmark, run ablations and plot.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{ablate, bench, collect, eval, plot, train};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "idt", version, about = "Hierarchical in-context reinforcement learning on grid-world tasks")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then IDT_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect Q-learning histories and write the dataset plus manifest.
    Collect(collect::CollectArgs),
    /// Train IDT or a flat baseline on a dataset.
    Train(train::TrainArgs),
    /// Roll a checkpoint out on held-out tasks.
    Eval(eval::EvalArgs),
    /// Token budgets and wall time per method.
    Bench(bench::BenchArgs),
    /// Train and evaluate one model per setting of a sweep; writes a CSV.
    Ablate(ablate::AblateArgs),
    /// Render return curves from evaluation reports.
    Plot(plot::PlotArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Plot(args) = &cli.command {
        return plot::run(args);
    }
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.resolve_seed(cli.seed)?;
    config.validate()?;
    match &cli.command {
        Command::Collect(a) => collect::run(&config, a),
        Command::Train(a) => train::run(&config, a),
        Command::Eval(a) => eval::run(&config, a),
        Command::Bench(a) => bench::run(&config, a),
        Command::Ablate(a) => ablate::run(&config, a),
        Command::Plot(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

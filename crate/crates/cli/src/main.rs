use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subelliptic::runner::{self, Command, RunError, RunOptions};

/// Run one experiment from a JSON config into its own directory.
#[derive(Parser, Debug)]
#[command(name = "subfp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true, value_name = "K")]
    workers: Option<usize>,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Frame checks, Hörmander rank and Itô correction.
    GroupCheck,
    /// Euler–Maruyama path ensemble.
    Simulate,
    /// Grid Fokker–Planck solve.
    FpSolve,
    /// Fortet–Mourier distance between two atom sets.
    FmDist,
    /// d₀ between the start law and later laws.
    HolderCurve,
    /// Monte Carlo Feynman–Kac estimate.
    FeynmanKac,
    /// KDE of simulated paths against the grid solution.
    CompareDuality,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GroupCheck => Command::GroupCheck,
            Cmd::Simulate => Command::Simulate,
            Cmd::FpSolve => Command::FpSolve,
            Cmd::FmDist => Command::FmDist,
            Cmd::HolderCurve => Command::HolderCurve,
            Cmd::FeynmanKac => Command::FeynmanKac,
            Cmd::CompareDuality => Command::CompareDuality,
        }
    }
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let path = cli.config.as_ref().ok_or_else(|| RunError::Config {
        path: "--config".into(),
        message: "a config file is required".into(),
    })?;
    let config = runner::load_config(path)?;
    let opts = RunOptions { out: cli.out.clone(), seed: cli.seed, workers: cli.workers, quiet: cli.quiet };
    runner::run_experiment(cli.command.into(), &config, &opts).map(|_| ())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("subfp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

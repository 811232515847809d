use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bfstack::experiment::{cmd_phi, cmd_riccati, cmd_simulate, cmd_sweep, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "bfstack", version, about = "Backward-leader / forward-followers mean-field Stackelberg experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured number of Monte Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Limit follower Riccati solutions (riccati.csv).
    Riccati,
    /// Leader decoupling field (phi.csv).
    Phi,
    /// Costs and perturbation gaps for one population size.
    Simulate {
        #[arg(long = "N", value_name = "N")]
        n: usize,
        /// Also write every limit path (limit_paths.csv).
        #[arg(long)]
        limit_paths: bool,
    },
    /// Mean-field error over the configured population sizes (epsilon.csv).
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut options = RunOptions {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        paths: cli.paths,
        limit_paths: false,
    };
    let result = match cli.command {
        Command::Riccati => cmd_riccati(&options),
        Command::Phi => cmd_phi(&options),
        Command::Simulate { n, limit_paths } => {
            options.limit_paths = limit_paths;
            cmd_simulate(&options, n)
        }
        Command::Sweep => cmd_sweep(&options),
    };
    match result {
        Ok(manifest) => {
            print!("{}", manifest.render());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

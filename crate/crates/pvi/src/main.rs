use clap::{Args, Parser, Subcommand};
use pvi::config::ExperimentConfig;
use pvi::runner;
use std::path::PathBuf;
use std::process::ExitCode;

/// Particle-based continuous policy/value iteration for one-dimensional
/// entropy-regularized stochastic control.
#[derive(Parser)]
#[command(name = "pvi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Key = value experiment file; `problem` selects a builtin preset that
    /// the remaining keys override.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coupled policy/value iteration described by a config file.
    Run(RunArgs),
    /// Integrate the closed-form linear-quadratic coefficient dynamics.
    Oracle(RunArgs),
    /// Run two coupled iterations with offset initializations and judge the
    /// contraction of their gap.
    Compare(RunArgs),
    /// Re-judge a recorded run directory from its echoed config and CSVs.
    Diagnose {
        /// Directory holding config_echo.txt and the trajectory CSVs.
        #[arg(long)]
        dir: PathBuf,
        /// Suppress the summary on stdout.
        #[arg(long)]
        quiet: bool,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, pvi::Error> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => load(args).and_then(|cfg| runner::run_coupled(&cfg, args.quiet)),
        Command::Oracle(args) => load(args).and_then(|cfg| runner::run_oracle(&cfg, args.quiet)),
        Command::Compare(args) => load(args).and_then(|cfg| runner::run_compare(&cfg, args.quiet)),
        Command::Diagnose { dir, quiet } => runner::run_diagnose(dir, *quiet),
    };
    match outcome {
        Ok(report) if report.all_passed() => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

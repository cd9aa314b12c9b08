//! `dmtf`: generate suites, train, evaluate, run ablations, validate
//! artifacts and replay trajectories.

mod commands;
mod replay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dmtf_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dmtf", version, about = "Audio-visual navigation with multi-target fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Heard,
    Unheard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AgentKind {
    Policy,
    Oracle,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test suites and the template manifest.
    GenSuite(commands::GenSuiteArgs),
    /// Train a policy from a run config.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint (or the oracle / random baseline) on a suite.
    Eval(commands::EvalArgs),
    /// Train the full model and each ablation, then tabulate test metrics.
    Ablate(commands::AblateArgs),
    /// Re-check written artifacts.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Print an ASCII replay of one episode from a trajectory log.
    Replay(replay::ReplayArgs),
}

fn run(cli: Cli) -> Result<(), Error> {
    let workers = commands::configure_workers()?;
    match cli.command {
        Command::GenSuite(a) => commands::gen_suite(&a),
        Command::Train(a) => commands::train(&a, workers),
        Command::Eval(a) => commands::eval(&a, workers),
        Command::Ablate(a) => commands::ablate(&a, workers),
        Command::Validate { paths } => commands::validate(&paths),
        Command::Replay(a) => replay::replay(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end for gated temporal diffusion: dataset generation,
//! training, sampling, evaluation, gradient checking, and gate inspection.
//!
//! Every subcommand logs the fully resolved configuration it runs with, so a
//! run is reproducible from its log and seed alone. Exit codes: 0 success,
//! 2 usage or configuration error, 3 data or file-format error, 4 numerical
//! failure (non-finite values), 5 failed gradient check.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use gtd_core::pipeline::PipelineError;
use gtd_core::{ContainerError, DataError, NumericsError, TrainError};
use std::fmt;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gtd",
    version,
    about = "Diffusion-based dense anticipation of action sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grammar dataset directory.
    GenData(commands::GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Sample future label sequences from a checkpoint into a prediction file.
    Sample(commands::SampleArgs),
    /// Score a prediction file against dataset ground truth.
    Eval(commands::EvalArgs),
    /// Finite-difference check of every operator and both training losses.
    Gradcheck(commands::GradcheckArgs),
    /// Dump the sigmoid gate activations for one sequence.
    InspectGates(commands::InspectGatesArgs),
}

/// Failure classes, one per non-zero exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration (exit 2).
    Usage(String),
    /// Unreadable or malformed dataset, checkpoint, or prediction file
    /// (exit 3).
    Data(String),
    /// Non-finite values in training or inference (exit 4).
    Numerics(String),
    /// Gradient check above tolerance (exit 5).
    Gradcheck(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerics(_) => 4,
            CliError::Gradcheck(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m)
            | CliError::Data(m)
            | CliError::Numerics(m)
            | CliError::Gradcheck(m) => f.write_str(m),
        }
    }
}

// Numeric errors split by kind: non-finite values are genuine numerical
// failures, an out-of-domain argument traces back to configuration, and a
// shape mismatch means the inputs do not fit together.
impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> CliError {
        let msg = e.to_string();
        match e {
            NumericsError::NonFinite { .. } => CliError::Numerics(msg),
            NumericsError::InvalidArgument { .. } => CliError::Usage(msg),
            NumericsError::ShapeMismatch { .. } => CliError::Data(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        let msg = e.to_string();
        match e {
            TrainError::Config { .. } => CliError::Usage(msg),
            TrainError::NonFiniteLoss { .. } => CliError::Numerics(msg),
            TrainError::Numerics(n) => n.into(),
            TrainError::Checkpoint(_) | TrainError::CheckpointMeta { .. } => CliError::Data(msg),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        let msg = e.to_string();
        match e {
            DataError::Numerics(n) => n.into(),
            _ => CliError::Data(msg),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        let msg = e.to_string();
        match e {
            PipelineError::Numerics(n) => n.into(),
            _ => CliError::Data(msg),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> CliError {
        CliError::Data(e.to_string())
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Sample(args) => commands::sample(args),
        Command::Eval(args) => commands::eval(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::InspectGates(args) => commands::inspect_gates(args),
    }
}

fn main() -> ExitCode {
    // clap itself exits with code 2 on unknown flags or missing arguments.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

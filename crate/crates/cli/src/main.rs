//! `rcm`: generate data, pretrain, decompose, add and train tasks, evaluate
//! and analyse, one subcommand per step.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or gate failure, 3 runtime
//! failure (I/O, divergence).

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A check ran and failed.
    Gate(String),
    Core(rcm_core::Error),
}

impl From<rcm_core::Error> for CliError {
    fn from(e: rcm_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Gate(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Gate(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "rcm",
    version,
    about = "Reparameterized convolutions for incremental multi-task learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic multi-task dataset into a directory.
    GenData(commands::GenData),
    /// Pretrain a backbone on the shape-classification proxy task.
    Pretrain(commands::Pretrain),
    /// Response-initialize a plain checkpoint and gate on equivalence.
    Decompose(commands::Decompose),
    /// Register a new task on a checkpoint.
    AddTask(commands::AddTask),
    /// Train one registered task.
    Train(commands::Train),
    /// Score tasks and optionally compare against single-task baselines.
    Eval(commands::Eval),
    /// Correlate per-task gradient structure on one layer's shared weights.
    Rsa(commands::Rsa),
    /// Print the parameter table of an architecture.
    Params(commands::Params),
    /// Compare two checkpoints layer by layer on one task.
    Verify(commands::Verify),
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("RCM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "RCM_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_cap()?;
    match cli.command {
        Cmd::GenData(a) => a.run(threads),
        Cmd::Pretrain(a) => a.run(threads),
        Cmd::Decompose(a) => a.run(threads),
        Cmd::AddTask(a) => a.run(threads),
        Cmd::Train(a) => a.run(threads),
        Cmd::Eval(a) => a.run(threads),
        Cmd::Rsa(a) => a.run(threads),
        Cmd::Params(a) => a.run(threads),
        Cmd::Verify(a) => a.run(threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

//! `quantsim`: reference run, gradient capture, solve, validation and
//! probing of fixed-point quantization schemes, driven by a project file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{Checkpointing, ModeKind, Project};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
    #[error("artifact {file} was produced from config hash {found}, current inputs hash to {expected}")]
    HashMismatch { file: String, found: String, expected: String },
    #[error("{0}")]
    Infeasible(String),
    #[error("{successes}/{trials} trials within tolerance, below the required {required}")]
    ThresholdUnmet { successes: usize, trials: usize, required: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) | CliError::Io(_) | CliError::HashMismatch { .. } => 1,
            CliError::Infeasible(_) => 2,
            CliError::ThresholdUnmet { .. } => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "quantsim", version, about = "Derive and validate fixed-point quantization schemes for simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-precision run: evaluation value and per-quantity ranges.
    Reference(Common),
    /// Reverse sweep: squared-adjoint tally per quantity.
    Gradients(Common),
    /// Pick fraction bits for an error bound or a memory budget.
    Solve(Common),
    /// Run the quantized simulation repeatedly and score it.
    Validate(Common),
    /// Success rates of perturbed variants of the solved scheme.
    Probe(Common),
    /// Bit-pack footprint and round-trip report for the solved scheme.
    PackBench(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Project file.
    #[arg(long)]
    config: PathBuf,
    /// Validation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeKind>,
    /// Round to nearest instead of dithering.
    #[arg(long)]
    no_dither: bool,
    #[arg(long, value_enum)]
    checkpointing: Option<Checkpointing>,
}

impl Common {
    fn project(&self) -> Result<Project, CliError> {
        let mut p = Project::load(&self.config)?;
        if let Some(seed) = self.seed {
            p.config.seed = Some(seed);
        }
        if let Some(trials) = self.trials {
            if trials == 0 {
                return Err(CliError::Invalid("--trials must be at least 1".into()));
            }
            p.config.trials = trials;
        }
        if let Some(mode) = self.mode {
            p.config.mode = mode;
        }
        if self.no_dither {
            p.config.dither = false;
        }
        if let Some(c) = self.checkpointing {
            p.config.checkpointing = c;
        }
        Ok(p)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Reference(c) => c.project().and_then(|p| commands::reference(&p)),
        Command::Gradients(c) => c.project().and_then(|p| commands::gradients(&p)),
        Command::Solve(c) => c.project().and_then(|p| commands::solve(&p)),
        Command::Validate(c) => c.project().and_then(|p| commands::validate(&p)),
        Command::Probe(c) => c.project().and_then(|p| commands::probe(&p)),
        Command::PackBench(c) => c.project().and_then(|p| commands::pack_bench(&p)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

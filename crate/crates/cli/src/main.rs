//! `mcdba`: simulate scenes, run the bundle adjuster on them, evaluate the
//! result and inspect co-visibility graphs.

mod commands;
mod config;
#[cfg(test)]
mod tests;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser)]
#[command(name = "mcdba", version, about = "Multi-camera dense bundle adjustment on synthetic rigs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene bundle with ground truth and oracle flow targets.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run warmup, initialization and active steps on a bundle.
    Solve {
        /// Bundle directory written by `simulate`.
        bundle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a solution against the bundle's ground truth.
    Eval {
        bundle: PathBuf,
        /// Directory written by `solve`.
        solution: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Grow the co-visibility graph over the configured steps and dump it.
    Graph {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common } => commands::simulate(common),
        Command::Solve { bundle, common } => commands::solve(bundle, common),
        Command::Eval { bundle, solution, common } => commands::eval(bundle, solution, common),
        Command::Graph { common } => commands::graph(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

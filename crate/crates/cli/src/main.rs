//! `debcat`: pretrain, train, evaluate and analyze debiased CAT policies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "debcat", version, about = "Debiased data-driven computerized adaptive testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit and freeze the diagnosis model on the training examinees.
    Pretrain(Overrides),
    /// Train a selection policy against the frozen model.
    Train(Overrides),
    /// Score a trained policy on the test examinees.
    Eval(Overrides),
    /// Export ratio tables and histograms from evaluated runs.
    Analyze {
        /// Run directories holding `eval-*` reports.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Train and evaluate one run per omega, each in its own process.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated omega values.
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8, 1.0])]
        omegas: Vec<f64>,
    },
    /// Write a synthetic interaction log with known abilities.
    Simulate {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        examinees: u32,
        #[arg(long, default_value_t = 200)]
        questions: u32,
    },
}

/// Marks an error as a usage or configuration problem (exit 2).
#[derive(Debug)]
pub struct Usage(pub anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

pub trait UsageExt<T> {
    fn usage(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> anyhow::Result<T> {
        self.map_err(|e| Usage(e.into()).into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(o) => commands::pretrain(&o),
        Command::Train(o) => commands::train(&o),
        Command::Eval(o) => commands::eval(&o),
        Command::Analyze { run_dirs } => commands::analyze(&run_dirs),
        Command::Sweep { overrides, omegas } => commands::sweep(&overrides, &omegas),
        Command::Simulate {
            out,
            seed,
            examinees,
            questions,
        } => commands::simulate(&out, seed, examinees, questions),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Usage>() {
            Some(u) => {
                eprintln!("error: {u}");
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

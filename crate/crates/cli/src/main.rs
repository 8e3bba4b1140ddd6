mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigError;

/// Stochastic downsampling point training, calibration, evaluation and cost analysis.
#[derive(Parser)]
#[command(name = "sdpoint", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute instance-specific batch-norm statistics and store them in the checkpoint.
    Calibrate(commands::CalibrateArgs),
    /// Evaluate one instance or the whole catalog on the validation set.
    Eval(commands::EvalArgs),
    /// Print the FLOP cost of every instance.
    Cost(commands::CostArgs),
    /// Minimum-cost grouping, scale sensitivity or padded-pixel ratios.
    Analyze(commands::AnalyzeArgs),
    /// Write a generated dataset in the CIFAR-10 binary layout.
    SynthData(SynthArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A command-line problem that is not a configuration file error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Data files that are missing or unreadable.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return EXIT_USAGE;
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<sdpoint::Error>() {
            use sdpoint::Error::*;
            return match e {
                NonFiniteLoss { .. } => EXIT_NUMERICAL,
                Data { .. } | EmptyData | Io(_) | Format(_) | LabelOutOfRange { .. } => EXIT_DATA,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::SynthData(a) => commands::synth_data(&a.out, a.train, a.val, a.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

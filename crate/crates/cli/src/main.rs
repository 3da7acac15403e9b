//! `melafuse`: dataset synthesis, patient-grouped splitting, k-fold training,
//! evaluation, parameter audits and plot rendering.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid arguments or
//! configuration, 3 I/O or data error, 4 fewer patients than folds,
//! 5 training diverged, 6 checkpoint incompatible with the model.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use melafuse::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Selector(_) | Error::InvalidProbability { .. } => 2,
                Error::Io(_)
                | Error::Csv(_)
                | Error::Schema { .. }
                | Error::Integrity { .. }
                | Error::ClassMissing(_)
                | Error::Image { .. }
                | Error::Format(_) => 3,
                Error::InsufficientGroups { .. } => 4,
                Error::Divergence { .. } => 5,
                Error::Compatibility(_) => 6,
                _ => 1,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "melafuse", version, about = "Image + metadata fusion classifiers for dermoscopy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dermoscopy dataset (metadata.csv + images/).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        malignant_frac: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Probability that an image carries hair strokes.
        #[arg(long)]
        hair_prob: Option<f64>,
    },
    /// Assign patient-grouped folds and write a manifest.
    Split {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = melafuse::splitter::DEFAULT_FOLDS)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// K-fold training; writes checkpoints and a report bundle.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `--section.key value` overrides applied on top of the file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Print an architecture's stage table and parameter counts.
    Params {
        /// Architecture name, or a `width,depth,resolution` EfficientNet scaling triple.
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// Score a dataset with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration replacing the model settings stored beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Render an epoch-statistics or ROC CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = plot::Metric::Loss)]
        metric: plot::Metric,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { n, malignant_frac, size, seed, out, hair_prob } => {
            commands::synth(n, malignant_frac, size, seed, hair_prob, &out)
        }
        Command::Split { csv, k, out } => commands::split(&csv, k, &out),
        Command::Train { config, overrides } => commands::train(config.as_deref(), &overrides),
        Command::Params { arch, classes } => commands::params(&arch, classes),
        Command::Eval { checkpoint, csv, images, out, config, overrides } => {
            commands::eval(&checkpoint, &csv, &images, &out, config.as_deref(), &overrides)
        }
        Command::Plot { input, out, metric } => commands::plot(&input, &out, metric),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

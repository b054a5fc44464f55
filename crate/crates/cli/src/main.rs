//! `deferkit` — evaluate and train deferral rules for two-model cascades
//! over recorded token probability traces.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "deferkit",
    version,
    about = "Deferral-rule evaluation and training for two-model cascades",
    after_help = "Exit codes: 1 internal error, 2 usage, 3 unknown rule or variant, \
                  4 missing embeddings, 5 unreadable or invalid input, 6 output write failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file with planted structure.
    Synth(commands::SynthArgs),
    /// Score traces under deferral rules; export curves and an AUC table.
    Eval(commands::EvalArgs),
    /// Train a post-hoc deferral rule and save the model artifacts.
    Train(commands::TrainArgs),
    /// Export the deferral curve of a single rule.
    Curve(commands::CurveArgs),
    /// Length-bias, token-position, and golden-label diagnostics.
    Report(commands::ReportArgs),
}

/// Which examples a read-only command operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Test,
}

/// Errors with a stable exit code per failure class.
#[derive(Debug)]
pub enum CliError {
    /// Exit 3: a rule or variant name that does not parse.
    UnknownRule(String),
    /// Exit 4: the requested variant needs embeddings the data lacks.
    MissingEmbeddings(String),
    /// Exit 5: missing, unreadable, or invalid input.
    Input(String),
    /// Exit 6: an output path could not be written.
    Output(String),
    /// Exit 1: anything else.
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::UnknownRule(_) => 3,
            CliError::MissingEmbeddings(_) => 4,
            CliError::Input(_) => 5,
            CliError::Output(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::UnknownRule(m)
            | CliError::MissingEmbeddings(m)
            | CliError::Input(m)
            | CliError::Output(m)
            | CliError::Internal(m) => m,
        }
    }
}

impl From<deferkit::FeatureError> for CliError {
    fn from(e: deferkit::FeatureError) -> Self {
        use deferkit::FeatureError::*;
        match e {
            UnknownVariant(_) => CliError::UnknownRule(e.to_string()),
            MissingEmbedding { .. } | EmbeddingDimMismatch { .. } | MissingEmbeddingDim { .. } => {
                CliError::MissingEmbeddings(e.to_string())
            }
            TraceTooLong { .. } => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<deferkit::PostHocError> for CliError {
    fn from(e: deferkit::PostHocError) -> Self {
        match e {
            deferkit::PostHocError::Feature(f) => f.into(),
            deferkit::PostHocError::EmptyTrain | deferkit::PostHocError::EmptyValidation => {
                CliError::Input(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<deferkit::TraceError> for CliError {
    fn from(e: deferkit::TraceError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<deferkit::SynthError> for CliError {
    fn from(e: deferkit::SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<deferkit::EvalError> for CliError {
    fn from(e: deferkit::EvalError) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::run_synth(&args),
        Command::Eval(args) => commands::run_eval(&args),
        Command::Train(args) => commands::run_train(&args),
        Command::Curve(args) => commands::run_curve(&args),
        Command::Report(args) => commands::run_report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

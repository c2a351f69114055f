//! Experiment driver for temporal query network runs.
//!
//! Every run is described by one TOML config (see `config.rs`); subcommands
//! generate data, train, evaluate, export attention, and compare runs.

pub mod commands;
pub mod config;
pub mod error;
pub mod lock;
pub mod manifest;
pub mod summary;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

const EXIT_CODES: &str = "Exit codes:
  0  success
  2  configuration error (bad config/flags/schema, model mismatch)
  3  data or environment error (missing files, IO, lock conflicts)
  4  acceptance-gate failure (report gates, gradient tolerance)";

#[derive(Parser)]
#[command(
    name = "tqn",
    version,
    about = "Temporal query network experiment driver",
    after_help = EXIT_CODES
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one seed, e.g. `--seed-override train=99` (repeatable).
    #[arg(long = "seed-override", value_name = "K=V")]
    pub seed_override: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Stop once this many total epochs are done (the checkpoint resumes).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Args)]
pub struct AttendArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Sequence ids to export, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<u32>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory holding one run directory (with summary.json) per variant.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradCheckArgs {
    /// Number of random seeds per variant.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Variants to check, comma separated (default: tqn, selfattn_cls,
    /// seq2seq).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Take the schema from this config instead of the built-in benchmark
    /// schema.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct ValidateSchemaArgs {
    /// Queries table (CSV).
    #[arg(long)]
    pub queries: PathBuf,
    /// Classes table (CSV).
    #[arg(long)]
    pub classes: PathBuf,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark dataset named by a config.
    GenData(ConfigArgs),
    /// Train the configured variant; resumes from an existing checkpoint.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint and export predictions.
    Eval(EvalArgs),
    /// Export per-query attention maps for chosen sequences.
    Attend(AttendArgs),
    /// Tabulate completed runs and check the comparison gates.
    Report(ReportArgs),
    /// Verify training gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Load and validate a factorisation schema.
    ValidateSchema(ValidateSchemaArgs),
}

pub fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::run_eval::run(args),
        Command::Attend(args) => commands::attend::run(args),
        Command::Report(args) => commands::report::run(args),
        Command::GradCheck(args) => commands::grad_check::run(args),
        Command::ValidateSchema(args) => commands::validate_schema::run(args),
    }
}

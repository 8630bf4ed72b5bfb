//! Command-line front end: argument definitions and subcommand dispatch.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric abort, 4 shape mismatch,
//! 5 verification failure.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult, Exit};

#[derive(Debug, Parser)]
#[command(
    name = "udakit",
    version,
    about = "Unsupervised domain adaptation at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run configuration and write manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Print the accuracy of a checkpoint on a labeled table.
    Eval(EvalArgs),
    /// Evaluate the alignment and target losses on externally supplied arrays.
    Losses(LossesArgs),
    /// Finite-difference check of every loss composed with a small MLP.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset described by a TOML spec.
    GenData(GenDataArgs),
    /// Export a 2-D PCA projection of checkpoint features.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Delimited table with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Debug, Args)]
pub struct LossesArgs {
    /// Source feature table (every column is a feature).
    #[arg(long)]
    pub source_features: PathBuf,
    /// Source labels: a `label` column or a single-column table.
    #[arg(long)]
    pub source_labels: PathBuf,
    #[arg(long)]
    pub target_features: PathBuf,
    #[arg(long)]
    pub target_logits: PathBuf,
    /// Discriminator outputs on the source rows (single column).
    #[arg(long, requires = "disc_target")]
    pub disc_source: Option<PathBuf>,
    /// Discriminator outputs on the target rows (single column).
    #[arg(long, requires = "disc_source")]
    pub disc_target: Option<PathBuf>,
    /// Run configuration whose `[train]` table supplies temperature and kernel.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Class-confusion temperature; overrides the config.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Fixed base bandwidth instead of the median heuristic; overrides the config.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Recompute every value with the naive-loop oracle and report the deviation.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Negative control: route every loss through a node with a broken backward rule.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic dataset spec (TOML).
    pub spec: PathBuf,
    /// Output table.
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Copied to the output when the table has it.
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

/// Runs one subcommand, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Losses(a) => commands::losses(&a, out),
        Command::Gradcheck(a) => commands::gradcheck(&a, out),
        Command::GenData(a) => commands::gen_data(&a, out),
        Command::Embed(a) => commands::embed(&a, out),
    }
}

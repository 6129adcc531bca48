//! Command-line pipeline over the `ontex` library: parsing, validation,
//! evaluation, refinement, alignment losses and training artifacts.
//!
//! Every command writes its outputs and a `run_manifest.json` into the output
//! directory. Exit status: 0 success, 1 usage, 2 data, 3 service.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::PipelineConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ontex", version, about = "Ontology-aligned extraction pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Random seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Label inventory JSONL; overrides `paths.inventory`.
    #[arg(long, global = true)]
    pub inventory: Option<PathBuf>,
    /// Gold examples JSONL; overrides `paths.gold`.
    #[arg(long, global = true)]
    pub gold: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recover structured predictions from raw model outputs.
    Parse(RawArgs),
    /// Check gold and prediction files against the inventory.
    Validate(ValidateArgs),
    /// Score predictions at every match level, with error taxonomy.
    Evaluate(EvaluateArgs),
    /// Run an inference-time refinement procedure.
    Refine(RefineArgs),
    /// Compute per-example ontology alignment losses.
    AlignLoss(AlignLossArgs),
    /// Build the label-similarity prior from label embeddings.
    PriorBuild(PriorBuildArgs),
    /// Generate preference pairs from gold annotations.
    Prefs,
    /// Average named-vector checkpoint files element-wise.
    AvgCheckpoints(AvgArgs),
    /// Describe a gold corpus.
    Stats,
    /// Schema-compliance diagnostics over raw model outputs.
    Diagnose(RawArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Parse(_) => "parse",
            Self::Validate(_) => "validate",
            Self::Evaluate(_) => "evaluate",
            Self::Refine(_) => "refine",
            Self::AlignLoss(_) => "align-loss",
            Self::PriorBuild(_) => "prior-build",
            Self::Prefs => "prefs",
            Self::AvgCheckpoints(_) => "avg-checkpoints",
            Self::Stats => "stats",
            Self::Diagnose(_) => "diagnose",
        }
    }
}

#[derive(Debug, Args)]
pub struct RawArgs {
    /// JSONL of `{"example_id", "text"}` records.
    #[arg(long)]
    pub raw: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Predictions JSONL; overrides `paths.predictions`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Exit with a data error when any problem is found.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions JSONL; overrides `paths.predictions`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Token-Jaccard threshold for span matches.
    #[arg(long, default_value_t = ontex::metrics::SPAN_THRESHOLD)]
    pub span_threshold: f64,
    /// Training gold for rare-label counts; overrides `paths.train_gold`.
    #[arg(long)]
    pub train_gold: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    CotSr,
    SelfConsistency,
    Hybrid,
    Selector,
    Cgra,
    SeedMerge,
    Rerank,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Examples JSONL (`example_id`, `context`, optional `sentence`); defaults to the gold file.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Greedy predictions for hybrid, cgra and rerank; generated when absent.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Seed-model prediction files for seed-merge.
    #[arg(long = "seed-predictions", num_args = 1..)]
    pub seed_predictions: Vec<PathBuf>,
    /// Scripted reply file; overrides `gateway.mock_script`.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignLossArgs {
    /// Representation JSONL (`example_id`, `values`); overrides `paths.representations`.
    #[arg(long)]
    pub representations: Option<PathBuf>,
    /// Memory-bank representations; defaults to the batch itself.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Prior written by `prior-build`; the identity prior when absent.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Supervised loss to combine into the total objective.
    #[arg(long)]
    pub sft_loss: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PriorBuildArgs {
    /// Label embedding JSONL; overrides `paths.embeddings`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct AvgArgs {
    /// Checkpoint files to average.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "averaged.vec")]
    pub output: String,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::execute(cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ontex: {e}");
            e.exit_code()
        }
    }
}

//! `clozeqa` — batch driver for the cloze-style multiple-choice reading
//! comprehension pipeline.
//!
//! One subcommand per pipeline stage: ingest and describe data, probe or
//! augment it with a masked-LM, generate pretraining data, fine-tune,
//! predict, ensemble, and analyze results. Every command that writes an
//! artifact also writes a `<output>.manifest.json` capturing the argv,
//! the resolved configuration, the seed, and input digests.

mod artifacts;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clozeqa::corpus::{SplitName, TaskTag};
use clozeqa::probe::Similarity;

use config::{parse_override, PipelineConfig};

#[derive(Parser, Debug)]
#[command(
    name = "clozeqa",
    version,
    about = "Cloze-style multiple-choice reading comprehension pipeline"
)]
struct Cli {
    /// Config file (key = value lines); falls back to $CLOZEQA_CONFIG
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set epochs=3 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand, Debug)]
enum Commands {
    /// Load, validate, and describe a dataset file
    Ingest(IngestArgs),
    /// Rank candidates zero-shot with the masked-LM head
    Probe(ProbeArgs),
    /// Append each instance's strongest wrong masked-LM guess as an extra candidate
    Augment(AugmentArgs),
    /// Generate task-adaptive pretraining data
    TaptGen(TaptGenArgs),
    /// Fine-tune the candidate scorer
    Train(TrainArgs),
    /// Score a split with a trained checkpoint
    Predict(PredictArgs),
    /// Average several prediction files into one
    Ensemble(EnsembleArgs),
    /// Accuracy of a prediction file against a labeled split
    Evaluate(EvaluateArgs),
    /// Accuracy broken down by passage length
    AnalyzeLength(AnalyzeLengthArgs),
    /// Digest of wrong predictions, most confident first
    ReportErrors(ReportErrorsArgs),
}

#[derive(Args, Debug)]
pub(crate) struct IngestArgs {
    /// Dataset JSON-Lines file
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Task tag: subtask1 | subtask2 | synthetic
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    /// Split name: train | trial | dev | test
    #[arg(long, default_value = "train")]
    pub split: SplitName,
    /// Tokenizer artifact for token statistics (default: derived from the data)
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Re-serialize the split canonically to this path
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct ProbeArgs {
    /// Dataset JSON-Lines file
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    /// Trained checkpoint; omitted, a fresh seeded encoder is built from config
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Tokenizer artifact (default: checkpoint sidecar, else derived)
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Scoring rule: mask-likelihood | embedding-cosine (overrides config)
    #[arg(long)]
    pub similarity: Option<Similarity>,
    /// Write per-instance rankings here as JSON lines
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct AugmentArgs {
    /// Labeled dataset JSON-Lines file
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "train")]
    pub split: SplitName,
    /// Checkpoint whose masked-LM head mines the negatives
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Augmented dataset output
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub(crate) enum TaptMode {
    /// Question-with-gold-answer sequences in fine-tuning input format
    WithinTask,
    /// Masked-LM examples from a document corpus
    Mlm,
    /// Sentence pairs for next-sentence prediction
    Nsp,
}

#[derive(Args, Debug)]
pub(crate) struct TaptGenArgs {
    /// What to generate
    #[arg(long, value_enum)]
    pub mode: TaptMode,
    /// Labeled dataset (within-task mode)
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Plain-text corpus, one document per line (mlm and nsp modes)
    #[arg(long, value_name = "FILE")]
    pub docs: Option<PathBuf>,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "train")]
    pub split: SplitName,
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Output file (mlm mode also writes `<out>.labels`)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct TrainArgs {
    /// Labeled training split
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Labeled development split for best-epoch selection
    #[arg(long, value_name = "FILE")]
    pub dev: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    /// Tokenizer artifact (default: derived from both splits and saved
    /// next to the checkpoint)
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Training-history JSON (default `<out>.history.json`)
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct PredictArgs {
    /// Dataset JSON-Lines file
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Tokenizer artifact (default: checkpoint sidecar, else derived)
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Predictions output, JSON lines {"id", "probs", "choice"}
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct EnsembleArgs {
    /// Member prediction files
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    pub members: Vec<PathBuf>,
    /// Combined predictions output
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct EvaluateArgs {
    /// Predictions JSON-Lines file
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Labeled dataset the predictions cover
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    /// Task the model was trained on; turns on a transfer report
    #[arg(long)]
    pub source_task: Option<TaskTag>,
    /// Task of the evaluation data (defaults to --task)
    #[arg(long)]
    pub target_task: Option<TaskTag>,
}

#[derive(Args, Debug)]
pub(crate) struct AnalyzeLengthArgs {
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    /// Tokenizer for counting passage tokens (default: derived)
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
    /// Comma-separated bucket edges (overrides config `bucket_edges`)
    #[arg(long, value_name = "EDGES")]
    pub edges: Option<String>,
    /// Write the per-bucket table as CSV
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct ReportErrorsArgs {
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "subtask1")]
    pub task: TaskTag,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    /// Maximum number of cases (overrides config `error_limit`)
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the full case list as JSON
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let overrides = cli
        .overrides
        .iter()
        .map(|raw| parse_override(raw))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let config = PipelineConfig::resolve(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Commands::Ingest(args) => commands::ingest(args, &config),
        Commands::Probe(args) => commands::probe(args, &config),
        Commands::Augment(args) => commands::augment(args, &config),
        Commands::TaptGen(args) => commands::tapt_gen(args, &config),
        Commands::Train(args) => commands::train(args, &config),
        Commands::Predict(args) => commands::predict(args, &config),
        Commands::Ensemble(args) => commands::ensemble(args, &config),
        Commands::Evaluate(args) => commands::evaluate(args, &config),
        Commands::AnalyzeLength(args) => commands::analyze_length(args, &config),
        Commands::ReportErrors(args) => commands::report_errors(args, &config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Errors from the pipeline library carry a category; anything
            // else is a front-end problem.
            let category = err
                .chain()
                .find_map(|cause| cause.downcast_ref::<clozeqa::Error>())
                .map(clozeqa::Error::category)
                .unwrap_or("cli");
            eprintln!("error[{category}]: {err:#}");
            ExitCode::FAILURE
        }
    }
}

//! `dualenc`: batch entry points for vocabulary induction, training,
//! encoding, ranking, evaluation and intent classification.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dualenc_core::train::TrainConfig;

use crate::settings::defaults_help;

#[derive(Debug, Parser)]
#[command(name = "dualenc", version, about = "Dual-encoder conversational response selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Induce a subword vocabulary from a text or JSONL corpus.
    BuildVocab(BuildVocabArgs),
    /// Pretrain a dual encoder on (context, response) pairs.
    Train(TrainArgs),
    /// Continue training a saved model with fine-tuning defaults.
    Finetune(FinetuneArgs),
    /// Encode texts to r or h vectors as newline-delimited JSON.
    Encode(EncodeArgs),
    /// Rank candidate responses for one context.
    Rank(RankArgs),
    /// Report R_N@k and MRR on a file of evaluation instances.
    Eval(EvalArgs),
    /// Train an intent classifier on frozen encodings.
    IntentTrain(IntentTrainArgs),
    /// Score a trained intent classifier on labelled utterances.
    IntentEval(IntentEvalArgs),
    /// Print a model file's header, parameter counts and size breakdown.
    InspectModel(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// One text per line.
    Text,
    /// Corpus records with context, response and optional extra_contexts.
    Jsonl,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: InputFormat,
    /// Minimum count for a subword to be kept.
    #[arg(long, default_value_t = 250)]
    pub min_frequency: u64,
    #[arg(long, default_value_t = 1000)]
    pub oov_buckets: u32,
    #[arg(long, default_value_t = 20)]
    pub max_subword_chars: usize,
    #[arg(long, default_value_t = 4)]
    pub max_consecutive_digits: usize,
    #[arg(long, default_value_t = 4)]
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size architecture.
    Full,
    /// Six blocks at width 128 for desk-scale runs.
    Small,
}

/// Training flags. Unset flags fall back to the config file, then to the
/// built-in defaults listed below.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Directory for checkpoints, the effective vocabulary and metrics.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with optional [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation instances scored every --eval-every steps.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub multi_context: bool,
    /// Ablation letter (A-F).
    #[arg(long)]
    pub ablation: Option<char>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub anneal_steps: Option<u64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_pool_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub range_update_period: Option<u64>,
    /// Train in plain 32-bit instead of quantization-aware mixed precision.
    #[arg(long)]
    pub no_quantize: bool,
    /// Continue from state.bin in --out-dir when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Pretrained model file to start from.
    #[arg(long)]
    pub init: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Context,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Representation {
    /// Post-reduction vector before the projection head.
    R,
    /// Final unit-norm encoding.
    H,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// One text per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "context")]
    pub side: SideArg,
    #[arg(long, value_enum, default_value = "h")]
    pub representation: Representation,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub context: String,
    /// Earlier turns, oldest first (repeatable).
    #[arg(long = "extra-context")]
    pub extra_contexts: Vec<String>,
    /// One candidate response per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Print only the best N (all when omitted).
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL instances with context, candidates, relevant_index.
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Debug encoder that matches identical strings; needs no model.
    #[arg(long, conflicts_with_all = ["model", "vocab"])]
    pub copy_encoder: bool,
    #[arg(long, default_value_t = dualenc_core::eval::DEFAULT_POOL_SIZE)]
    pub pool_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,3,10")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct IntentTrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSONL lines with text and label; split 80/10/10.
    #[arg(long)]
    pub data: PathBuf,
    /// Where the classifier is written (JSON).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    pub hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.75")]
    pub dropout: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.1")]
    pub lr: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IntentEvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also print each prediction as JSON.
    #[arg(long)]
    pub predictions: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

/// The clap command with the resolved training defaults appended to the
/// help of `train` and `finetune`.
pub fn command() -> clap::Command {
    Cli::command()
        .mut_subcommand("train", |c| c.after_help(defaults_help(&TrainConfig::pretrain())))
        .mut_subcommand("finetune", |c| c.after_help(defaults_help(&TrainConfig::finetune())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

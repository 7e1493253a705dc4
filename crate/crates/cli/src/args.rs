use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use infocascade::corpus::Task;
use infocascade::metrics::Averaging;
use infocascade::training::SelectOn;
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "infocascade", version, about = "Misinformation cascade classifiers and independence testing")]
pub struct Cli {
    /// Random seed for splits, initialisation, shuffling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with default values; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for all outputs (default: out).
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Clean and validate a JSON Lines corpus, then split it into train/val/test.
    Prepare(PrepareArgs),
    /// Build a vocabulary from a JSON Lines corpus.
    BuildVocab(VocabArgs),
    /// Train a hybrid classifier for one task.
    Train(TrainArgs),
    /// Evaluate a saved model on a labelled JSON Lines file.
    Eval(EvalArgs),
    /// Run the three-stage cascade described by a manifest.
    Pipeline(PipelineArgs),
    /// Chi-squared test of independence on a contingency CSV.
    Chi2(Chi2Args),
    /// Emit plot data (CSV) from a pipeline report.
    Report(ReportArgs),
}

/// Settings read from `--config`. Each command section accepts the same
/// keys as the command's long flags, with underscores.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub prepare: PrepareArgs,
    pub build_vocab: VocabArgs,
    pub train: TrainArgs,
    pub eval: EvalArgs,
    pub pipeline: PipelineArgs,
    pub chi2: Chi2Args,
    pub report: ReportArgs,
}

/// Fills every unset field of `self` from `file`.
macro_rules! layered {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn over(self, file: $ty) -> $ty {
                $ty { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareArgs {
    /// Input corpus (JSON Lines).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Label schema to validate against: veracity, implication or disorder.
    #[arg(long)]
    pub task: Option<Task>,
    /// Training fraction (default 0.8).
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Validation fraction (default 0.1).
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Test fraction (default 0.1).
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Stratify by gold label (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub stratified: Option<bool>,
    /// Fail on rejected records instead of skipping them (default false).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub strict: Option<bool>,
}

layered!(PrepareArgs { input, task, train_fraction, val_fraction, test_fraction, stratified, strict });

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabArgs {
    /// Corpus to count tokens in (JSON Lines).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Minimum token frequency (default 2).
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Maximum vocabulary size including reserved tokens (default 8000).
    #[arg(long)]
    pub max_size: Option<usize>,
}

layered!(VocabArgs { input, min_freq, max_size });

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Task to train: veracity, implication or disorder.
    #[arg(long)]
    pub task: Option<Task>,
    /// Training split (JSON Lines).
    #[arg(long = "train", value_name = "FILE")]
    pub train_file: Option<PathBuf>,
    /// Validation split (JSON Lines).
    #[arg(long = "val", value_name = "FILE")]
    pub val_file: Option<PathBuf>,
    /// Existing vocabulary; built from the training split when absent.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Model sidecar path (default: <out-dir>/<task>.json).
    #[arg(long, value_name = "FILE")]
    pub model_out: Option<PathBuf>,
    /// Vocabulary minimum frequency when building (default 2).
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Vocabulary size cap when building (default 8000).
    #[arg(long)]
    pub max_size: Option<usize>,
    /// Maximum sequence length including the leading CLS token (default 128).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Encoder width (default 64).
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads (default 4).
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Encoder blocks (default 2).
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Feed-forward width (default 256).
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// LSTM hidden size (default 64).
    #[arg(long)]
    pub lstm_hidden: Option<usize>,
    /// LSTM layers (default 1).
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    /// Dropout rate before the classification head (default 0.1).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Training epochs (default 30).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size (default 16).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate (default 0.001).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Decoupled weight decay (default 0.01).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clip (default 1.0).
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Checkpoint selection metric: val_accuracy or val_loss (default val_accuracy).
    #[arg(long)]
    pub select_on: Option<SelectOn>,
}

layered!(TrainArgs {
    task,
    train_file,
    val_file,
    vocab,
    model_out,
    min_freq,
    max_size,
    max_len,
    d_model,
    n_heads,
    n_layers,
    d_ff,
    lstm_hidden,
    lstm_layers,
    dropout,
    epochs,
    batch_size,
    learning_rate,
    weight_decay,
    clip_norm,
    select_on,
});

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Model sidecar written by `train`.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Labelled evaluation file (JSON Lines).
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Headline averaging: macro or micro (default macro).
    #[arg(long)]
    pub averaging: Option<Averaging>,
    /// Inference batch size (default 32).
    #[arg(long)]
    pub batch_size: Option<usize>,
}

layered!(EvalArgs { model, test, averaging, batch_size });

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineArgs {
    /// Pipeline manifest (JSON).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Significance level for the independence test (default 0.05).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Run the disorder stage on every indicative reply, not only fake-branch ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub widen_stage3: Option<bool>,
    /// Recompute the contingency table and test from saved stage outputs in the output directory.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub contingency_only: Option<bool>,
}

layered!(PipelineArgs { manifest, alpha, widen_stage3, contingency_only });

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Chi2Args {
    /// Contingency table CSV.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Significance level (default 0.05).
    #[arg(long)]
    pub alpha: Option<f64>,
}

layered!(Chi2Args { input, alpha });

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    /// Pipeline report JSON (default: <out-dir>/report.json).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
}

layered!(ReportArgs { input });

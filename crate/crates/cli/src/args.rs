//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "asp", version, about = "Attention-based attribute/object composition classifier")]
pub struct Cli {
    /// `key=value` settings file, or a run manifest to repeat. Flags take
    /// precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory with matching word embeddings.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Sweep the seen-score bias on a split and write the curve and summary.
    #[command(long_about = EVAL_ABOUT)]
    Eval(EvalArgs),
    /// Build a composition feasibility table from a file or a relatedness service.
    Feasibility(FeasibilityArgs),
    /// Retrain over a grid of head counts and/or MLP depths and report test HM.
    Ablate(AblateArgs),
}

const EVAL_ABOUT: &str = "\
Sweep the seen-score bias on a split and write the curve and summary.

Bias sign convention: the bias is ADDED to the scores of seen compositions
before the argmax. Negative values favor unseen compositions, positive values
favor seen ones. The curve lists every bias at which some prediction changes,
plus -inf and +inf; the summary reports the best seen accuracy, best unseen
accuracy, best harmonic mean and the area under the seen/unseen curve, as
percentages.";

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of attributes [default: 8]
    #[arg(long)]
    pub attrs: Option<usize>,
    /// Number of objects [default: 10]
    #[arg(long)]
    pub objs: Option<usize>,
    /// Image feature dimension [default: 64]
    #[arg(long)]
    pub dimg: Option<usize>,
    /// Samples per composition [default: 20]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Fraction of compositions withheld from training, in [0, 1) [default: 0.2]
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Feature noise standard deviation [default: 0.05]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Word embedding dimension [default: 300]
    #[arg(long)]
    pub dword: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model and optimizer settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Word embedding file; repeat to concatenate several per word.
    #[arg(long, value_name = "FILE")]
    pub embeddings: Vec<PathBuf>,
    /// Epochs [default: 80]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Attention heads; must divide the word dimension [default: 2]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Linear layers per projection MLP [default: 2]
    #[arg(long)]
    pub depth: Option<usize>,
    /// Width of the shared attribute/object space [default: 512]
    #[arg(long)]
    pub dshared: Option<usize>,
    /// Dropout probability [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Logit scale on cosine similarities [default: 20]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Residual connection around attention [default: true]
    #[arg(long)]
    pub residual: Option<bool>,
    /// Expected word dimension; checked against the embeddings.
    #[arg(long)]
    pub dword: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Output directory for model.aspc, train_log.csv and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for curve.csv, summary.txt and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Split to evaluate: train, val or test [default: test]
    #[arg(long)]
    pub split: Option<String>,
    /// `none`, or a feasibility TSV restricting predictions [default: none]
    #[arg(long, value_name = "none|FILE")]
    pub feasibility: Option<String>,
    /// Compositions with score strictly above this are feasible [default: 0]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FeasibilityArgs {
    /// Dataset directory supplying the vocabulary.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output TSV; the manifest goes to <out>.manifest.json.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// `offline` (read --in) or `remote` (query the service) [default: offline]
    #[arg(long, value_name = "offline|remote")]
    pub source: Option<String>,
    /// Input TSV for the offline source.
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Relatedness service base URL [default: https://api.conceptnet.io]
    #[arg(long, value_name = "URL")]
    pub base_url: Option<String>,
    /// Relatedness cache file [default: $ASP_CACHE_DIR/relatedness.tsv]
    #[arg(long, value_name = "FILE")]
    pub cache: Option<PathBuf>,
    /// Concurrent requests [default: 4]
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Head counts to train, comma-separated.
    #[arg(long, value_delimiter = ',', value_name = "N,..")]
    pub heads_grid: Vec<usize>,
    /// MLP depths to train, comma-separated.
    #[arg(long, value_delimiter = ',', value_name = "N,..")]
    pub depth_grid: Vec<usize>,
    /// Output directory for heads.csv, depth.csv and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

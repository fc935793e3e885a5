use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slyt_core::io::SynthKind;
use slyt_core::sample::Strategy;
use slyt_core::train::{ElementOrder, KlDirection, LossMode};

#[derive(Parser, Debug)]
#[command(name = "slyt", version, about = "Autoregressive layout generation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic layout corpus as JSONL.
    Synth(SynthArgs),
    /// Train a model on a JSONL corpus.
    Train(TrainArgs),
    /// Sample layouts from a checkpoint.
    Sample(SampleArgs),
    /// Complete partial layouts read from JSONL.
    Complete(CompleteArgs),
    /// Exact per-layout negative log-likelihood.
    Score(ScoreArgs),
    /// Layout statistics and model analyses.
    Eval(EvalArgs),
    /// Render layouts as SVG files.
    Render(RenderArgs),
    /// Train one model per setting of a hyperparameter and compare NLL.
    Ablate(AblateArgs),
    /// Write an untrained checkpoint.
    Init(InitArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Document,
    Grid,
    Asymmetric,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Document => SynthKind::Document,
            KindArg::Grid => SynthKind::Grid,
            KindArg::Asymmetric => SynthKind::Asymmetric,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "document")]
    pub kind: KindArg,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long)]
    pub min_elements: Option<usize>,
    #[arg(long)]
    pub max_elements: Option<usize>,
    /// Centroid jitter standard deviation, in bins.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the grammar's category names as a JSON array.
    #[arg(long)]
    pub categories_out: Option<PathBuf>,
}

/// Model hyperparameters; unset flags fall back to the config file and
/// then to the defaults.
#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub max_elements: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub tie_embeddings: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    LabelSmoothing,
    Nll,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::LabelSmoothing => LossMode::LabelSmoothing,
            LossArg::Nll => LossMode::Nll,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KlArg {
    PredictionToTarget,
    TargetToPrediction,
}

impl From<KlArg> for KlDirection {
    fn from(k: KlArg) -> Self {
        match k {
            KlArg::PredictionToTarget => KlDirection::PredictionToTarget,
            KlArg::TargetToPrediction => KlDirection::TargetToPrediction,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OrderArg {
    Raster,
    Random,
}

impl From<OrderArg> for ElementOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Raster => ElementOrder::Raster,
            OrderArg::Random => ElementOrder::Random,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub kl_direction: Option<KlArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    #[arg(long)]
    pub permute_prefix: bool,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus; without it the last `--val-fraction` of the
    /// corpus is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Category names as a JSON array.
    #[arg(long)]
    pub categories: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON run configuration with optional `model` and `train` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written with `--last`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Where the best checkpoint goes.
    #[arg(long)]
    pub out: PathBuf,
    /// Where the final checkpoint, with optimizer state, goes.
    #[arg(long)]
    pub last: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub bits: Option<u32>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Nucleus,
    Greedy,
    Temperature,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Nucleus => Strategy::Nucleus,
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Temperature => Strategy::Temperature,
        }
    }
}

#[derive(Args, Debug)]
pub struct SamplerFlags {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_elements: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Let the model emit tokens the sequence grammar forbids.
    #[arg(long)]
    pub no_grammar_mask: bool,
    /// JSON sampler configuration.
    #[arg(long)]
    pub sampler_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Partial layouts (JSONL); each is completed once.
    #[arg(long)]
    pub seeds: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    /// Feed seed elements in their given (raster) order.
    #[arg(long)]
    pub keep_seed_order: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8192)]
    pub token_budget: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Category names; taken from the checkpoint when one is given.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Precision used to read the corpus without a checkpoint.
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    /// Per-layout metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
    #[arg(long, default_value_t = 8192)]
    pub token_budget: usize,
    /// Per-layout NLL of the original and flipped layouts (needs a checkpoint).
    #[arg(long)]
    pub flips: Option<PathBuf>,
    /// Category n-gram counts for n = 2 and 3, as CSV.
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
    /// Analogy query `a,b,c` over category names (needs a checkpoint).
    #[arg(long)]
    pub analogy: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Layouts whose chamfer nearest neighbors in the corpus are listed.
    #[arg(long)]
    pub nn_queries: Option<PathBuf>,
    #[arg(long)]
    pub nn_out: Option<PathBuf>,
    /// Attention export (JSON) for the corpus layout `--attention-index`.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub attention_index: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub categories: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Quantization precisions to compare, e.g. `5,8`.
    #[arg(long, value_delimiter = ',')]
    pub bits: Vec<u32>,
    /// Element orders to compare, e.g. `raster,random`.
    #[arg(long, value_delimiter = ',', value_enum)]
    pub orders: Vec<OrderArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub categories: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero the output projection so every token has probability 1/V.
    #[arg(long)]
    pub zero_head: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bits: Option<u32>,
    #[command(flatten)]
    pub model: ModelFlags,
}

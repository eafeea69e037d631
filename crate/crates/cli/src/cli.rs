use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tunevec_core::activations::{BinarizePolicy, CorpusFormat, DEFAULT_WINDOW};
use tunevec_core::diffcore::{EmitDType, Granularity};
use tunevec_core::evalharness::McMode;
use tunevec_core::subspace::{Aggregation, SvdChoice};
use tunevec_core::AlignMode;

#[derive(Debug, Parser)]
#[command(
    name = "tunevec",
    version,
    about = "Tuning-vector extraction, arithmetic and analysis for transformer checkpoints"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalOpts {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true, env = "TUNEVEC_THREADS")]
    #[serde(skip)]
    pub threads: Option<usize>,

    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Built-in tensor naming rules: toy, llama, qwen2, phi3, meta.
    #[arg(long, global = true, default_value = "toy")]
    pub naming_preset: String,

    /// JSON rules file overriding the naming preset.
    #[arg(long, global = true)]
    pub component_map: Option<PathBuf>,

    /// How two checkpoints' tensor sets must agree: strict or intersect.
    #[arg(long, global = true, default_value = "strict")]
    pub mode: AlignMode,

    /// Dtype of emitted checkpoints: source or f32.
    #[arg(long, global = true, default_value = "source")]
    pub dtype_out: EmitDType,

    /// Only rank-2 tensors enter cosine reductions.
    #[arg(long, global = true)]
    pub matrices_only: bool,

    /// Analysis precision.
    #[arg(long, global = true, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tuning vector = fine-tuned − pretrained.
    Diff(DiffArgs),
    /// base + scale · tuning vector.
    Apply(ApplyArgs),
    /// Weighted sum of tuning vectors.
    Merge(MergeArgs),
    /// Cosine similarity between tuning vectors.
    Cosine(CosineArgs),
    /// Cosine similarity between raw checkpoint weights.
    Wsim(WsimArgs),
    /// Subspace alignment of a tuning vector with the pretrained SVD basis.
    Ssa(SsaArgs),
    /// FFN neuron activation profile of a toy model over a corpus.
    Profile(ProfileArgs),
    /// Normalized edit distance between two profiles' binary patterns.
    Editdist(EditdistArgs),
    /// Select the most active neurons and optionally measure the accuracy drop.
    Ablate(AblateArgs),
    /// Greedy-decoding evaluation of a toy model on a JSONL task.
    Eval(EvalArgs),
    /// Export plot data (CSV) from a report.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DiffArgs {
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub ft: PathBuf,
    /// Tuning vector checkpoint to write.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Optional JSON summary.
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ApplyArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tv: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub scale: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    /// Tuning vectors to add (two or more).
    #[arg(long = "tv", required = true, num_args = 1)]
    pub tvs: Vec<PathBuf>,
    /// Per-vector weights, comma separated (default all 1).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CosineArgs {
    /// Tuning vectors (two or more; more gives a similarity matrix).
    #[arg(long = "tv", required = true, num_args = 1)]
    pub tvs: Vec<PathBuf>,
    /// Display names for the vectors, in order.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// global, per-component or per-tensor.
    #[arg(long, default_value = "global")]
    pub granularity: Granularity,
    /// Leave embedding tensors out of every reduction.
    #[arg(long)]
    pub exclude_embed: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct WsimArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "global")]
    pub granularity: Granularity,
    #[arg(long)]
    pub exclude_embed: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SsaArgs {
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub tv: PathBuf,
    /// Rank rule: discarded energy fraction ≤ eps².
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    /// How energies combine per component kind: mean or sum.
    #[arg(long, default_value = "mean")]
    pub agg: Aggregation,
    /// dense, randomized or auto.
    #[arg(long, default_value = "auto")]
    pub svd: SvdChoice,
    #[arg(long, default_value_t = 8)]
    pub oversample: usize,
    #[arg(long, default_value_t = 2)]
    pub power_iters: usize,
    #[arg(long, default_value_t = 16)]
    pub initial_rank: usize,
    /// auto uses the dense SVD up to this short-side size.
    #[arg(long, default_value_t = 256)]
    pub auto_dense_limit: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Toy model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Model spec JSON (defaults to <model>.spec.json).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// UTF-8 text (one token per byte) or raw u32 LE token ids.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    pub corpus_format: CorpusFormat,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// mean_positive or fraction_threshold:<tau>.
    #[arg(long, default_value = "mean_positive")]
    pub binarize: BinarizePolicy,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EditdistArgs {
    /// Profile report of the first model.
    #[arg(long)]
    pub a: PathBuf,
    /// Profile report of the second model.
    #[arg(long)]
    pub b: PathBuf,
    /// Re-binarize both profiles with this policy instead of their own.
    #[arg(long)]
    pub binarize: Option<BinarizePolicy>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalOpts {
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
    /// generate (parse "Answer: [X]") or choice-logit (best letter logit).
    #[arg(long, default_value = "generate")]
    pub mc_mode: McMode,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Profile report ranking the neurons; otherwise profile --corpus here.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Percent of each layer's neurons to ablate, in (0, 100].
    #[arg(long, default_value_t = 1.0)]
    pub top_pct: f64,
    /// Evaluate with and without the ablation and report the drop.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalOpts,
    /// Also write the bare ablation set here.
    #[arg(long)]
    #[serde(skip)]
    pub set_out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// JSONL dataset: {id, prompt, choices?, gold, reference?} per line.
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ablation set (or ablate report) to apply.
    #[arg(long)]
    pub ablate: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// A JSON report written by another subcommand.
    #[arg(long)]
    pub input: PathBuf,
    /// Which matrix of a multi-key cosine report to export.
    #[arg(long)]
    pub key: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

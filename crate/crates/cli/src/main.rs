mod commands;
mod error;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "skillmerge", version = manifest::VERSION, about = "Train, merge and evaluate LoRA skill adapters on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Gen(GenArgs),
    /// Pretrain a base model on the synthetic corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune one LoRA adapter on one dataset.
    TrainSkill(TrainSkillArgs),
    /// Fine-tune one adapter of rank k·r on the union of k datasets.
    TrainDatamix(TrainDatamixArgs),
    /// Merge two adapters into a dense per-layer update.
    Merge(MergeArgs),
    /// Learn per-layer CAT coefficients over frozen adapters.
    TrainCat(TrainMixArgs),
    /// Learn per-layer softmax routers over frozen adapters.
    TrainMoe(TrainMixArgs),
    /// Fit global CAT weights by Nelder-Mead on few-shot examples.
    Lorahub(LorahubArgs),
    /// Grid-search TIES, DARE or linear merge hyperparameters.
    Sweep(SweepArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Elo ratings with bootstrap intervals from pairwise judgments.
    Elo(EloArgs),
    /// Super-linearity report from four accuracies.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Math,
    Code,
    Hard,
    Corpus,
    Format,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub task: Task,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file, or directory for `format` (one file per format).
    #[arg(long)]
    pub out: PathBuf,
    /// Examples held out into `--test-out`.
    #[arg(long, default_value_t = 0)]
    pub n_test: usize,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    /// Number of prompt formats for `format`.
    #[arg(long, default_value_t = 7)]
    pub n_formats: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Small,
    Composition,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Small)]
    pub preset: Preset,
    /// Override the corpus size of the preset.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Training config JSON replacing the preset's loop settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LoraArgs {
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// Defaults to twice the rank.
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub lora_dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainSkillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub lora: LoraArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainDatamixArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Skill datasets; with `--continual`, the knowledge datasets.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    /// Train continually: knowledge datasets first, fold, then these.
    #[arg(long)]
    pub continual: bool,
    #[arg(long = "instruction")]
    pub instruction: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub lora: LoraArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// One of cat, linear, ties, dare, slerp.
    pub method: String,
    pub adapter1: PathBuf,
    pub adapter2: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha2: f64,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub dare_b_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GranularityArg {
    Block,
    Module,
}

#[derive(Args, Debug)]
pub struct TrainMixArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "adapter", required = true)]
    pub adapters: Vec<PathBuf>,
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    /// Coefficient-training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub alpha_granularity: Option<GranularityArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LorahubArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "adapter", required = true)]
    pub adapters: Vec<PathBuf>,
    /// Few-shot examples of the target task.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Exact match of the generation against the answer.
    Accuracy,
    /// Exec-accuracy of emitted programs.
    Exec,
    /// Token-level F1 against the answer.
    F1,
    /// Mean masked cross-entropy.
    Loss,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// One of ties, dare, linear.
    pub method: String,
    pub adapter1: PathBuf,
    pub adapter2: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Validation dataset that scores each grid point.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Loss)]
    pub metric: Metric,
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<f64>>,
    #[arg(long = "alpha1", value_delimiter = ',')]
    pub alpha1: Option<Vec<f64>>,
    #[arg(long = "alpha2", value_delimiter = ',')]
    pub alpha2: Option<Vec<f64>>,
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttachArgs {
    /// LoRA adapter checkpoint(s). One means a plain adapter; several are
    /// combined by `--cat` or `--moe`.
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    /// Dense merged delta from `merge`.
    #[arg(long)]
    pub delta: Option<PathBuf>,
    /// Coefficients from `train-cat` or `lorahub`.
    #[arg(long)]
    pub cat: Option<PathBuf>,
    /// Routers from `train-moe`.
    #[arg(long)]
    pub moe: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub attach: AttachArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Accuracy)]
    pub metric: Metric,
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
    /// Keep the generations in the report.
    #[arg(long)]
    pub keep_generations: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EloArgs {
    /// Judgment records as JSON lines.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4.0)]
    pub k: f64,
    #[arg(long, default_value_t = 200.0)]
    pub initial: f64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Restrict the table to these models.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub base: f64,
    #[arg(long)]
    pub skill1: f64,
    #[arg(long)]
    pub skill2: f64,
    #[arg(long)]
    pub merged: f64,
    /// Read accuracies as percentages.
    #[arg(long)]
    pub percent: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

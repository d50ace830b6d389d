use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fedinstruct_core::SelectionPolicy;

#[derive(Debug, Parser)]
#[command(name = "fedinstruct", version, about = "Federated instruction tuning from unstructured corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn client corpora into instruction-response datasets.
    Generate(GenerateArgs),
    /// Score generated pairs and keep the top two-thirds per client.
    Filter(FilterArgs),
    /// Run federated averaging over client datasets.
    Federate(FederateArgs),
    /// Score responses against references with ROUGE-L and BERTScore.
    Evaluate(EvaluateArgs),
    /// generate → filter → federate → evaluate, driven by a config file.
    Pipeline(PipelineArgs),
    /// Write pair embeddings of generated and human-annotated data.
    ExportEmbeddings(ExportArgs),
    /// Write a synthetic multi-domain workspace for trying the pipeline.
    MakeToy(ToyArgs),
}

/// Flags shared by every command. Each overrides the config-file key of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the in-process deterministic backends for anything without an
    /// explicit endpoint flag.
    #[arg(long)]
    pub mock: bool,
    /// retrieval | fixed-in-domain | random-in-domain | random-out-domain | mixed:IN:OUT
    #[arg(long)]
    pub policy: Option<SelectionPolicy>,
    /// Few-shot examples per prompt.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub num_clients: Option<usize>,
    #[arg(long)]
    pub clients_per_round: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub local_steps: Option<usize>,
    /// Concurrent generation calls and trainer dispatches.
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub generation_url: Option<String>,
    #[arg(long)]
    pub reward_url: Option<String>,
    #[arg(long)]
    pub trainer_url: Option<String>,
    #[arg(long)]
    pub embed_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Client corpus (JSONL); repeat per client. The file stem is the client id.
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    /// Example pool (JSONL).
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generated dataset (JSONL); repeat per client.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    /// Source corpora, needed by the mock reward scorer.
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FederateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Filtered dataset (JSONL); repeat per client.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    /// Initial adapter parameters (FTP1).
    #[arg(long, conflicts_with = "init_zeros")]
    pub init: Option<PathBuf>,
    /// Start from zeros with this layout, e.g. lora_a=8x32,lora_b=32x8.
    #[arg(long)]
    pub init_zeros: Option<String>,
    /// Simulated quadratic trainer: `quadratic` or `quadratic:rows=N`.
    #[arg(long)]
    pub sim_trainer: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model responses (JSONL: id, response).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Evaluation set (JSONL: id, instruction, reference).
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Report BERTScore rescaled as (s - b) / (1 - b).
    #[arg(long)]
    pub bert_baseline: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub sim_trainer: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generated dataset (JSONL); only kept pairs are exported.
    #[arg(long = "generated")]
    pub generated: Vec<PathBuf>,
    /// Human-annotated pairs in dataset format.
    #[arg(long = "human")]
    pub human: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub clients: usize,
    #[arg(long, default_value_t = 20)]
    pub docs: usize,
    #[arg(long, default_value_t = 50)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 50)]
    pub eval_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

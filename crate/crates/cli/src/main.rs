//! `nnprompt`: build datastores, evaluate tasks across scoring modes, sweep
//! retrieval hyperparameters and inspect verbalizer coverage.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nnprompt_core::pipeline::{PmiPrior, ScoringMode};
use nnprompt_core::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "nnprompt", version, about = "Nearest-neighbor augmented zero-shot prompting")]
struct Cli {
    /// JSON file of default settings; explicit flags take precedence.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,

    /// Worker threads for instance-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode corpora into a datastore of (context embedding, next token) entries.
    BuildDatastore(BuildArgs),
    /// Score a labeled dataset under one or more modes and write a JSON report.
    Eval(EvalArgs),
    /// Evaluate a grid of (k, temperature, lambda) and write CSV.
    Sweep(SweepArgs),
    /// Report how often retrieval covers the bare and fuzzy verbalizers.
    Coverage(CoverageArgs),
    /// Write fuzzy verbalizer neighborhoods as JSON for a task spec.
    ExpandVerbalizer(ExpandArgs),
    /// Capture toy LM outputs for every context a run will query.
    ExportRecords(ExportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    Records,
}

#[derive(Args, Debug, Clone)]
pub struct LmArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Toy)]
    pub backend: BackendKind,
    /// Record file for `--backend records`.
    #[arg(long, value_name = "PATH")]
    pub records: Option<PathBuf>,
    /// Toy LM embedding seed.
    #[arg(long)]
    pub lm_seed: Option<u64>,
    #[arg(long)]
    pub lm_dim: Option<usize>,
    #[arg(long)]
    pub lm_window: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct BuildArgs {
    /// Vocabulary file, one token per line with `<unk>` first.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Build the vocabulary from the corpora, keeping this many tokens, and
    /// write it to `--vocab`.
    #[arg(long, value_name = "N")]
    pub max_vocab: Option<usize>,
    /// Corpus files; blank lines separate documents.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Store (corpus id, token offset) for every entry.
    #[arg(long)]
    pub provenance: bool,
    /// Also build an IVF index with this many lists.
    #[arg(long, requires = "index_out")]
    pub nlist: Option<usize>,
    #[arg(long, requires = "nlist")]
    pub index_out: Option<PathBuf>,
    /// Seed for k-means initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub lm: LmArgs,
}

#[derive(Args, Debug, Clone)]
pub struct TaskArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// JSONL of {"text": ..., "label": ...}.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RetrievalArgs {
    /// Datastore files; several are merged in order.
    #[arg(long, num_args = 1..)]
    pub datastore: Vec<PathBuf>,
    /// IVF index for a single datastore.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = parse_prior)]
    pub pmi_prior: Option<PmiPrior>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    pub lm: LmArgs,
    /// Comma-separated scoring modes, e.g. LM,KNN_PROMPT.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Vec<ScoringMode>,
    /// Demonstrations prepended to each prompt.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Training JSONL that demonstrations are drawn from.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Demonstration seeds, one run each. Defaults to four consecutive seeds
    /// from `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Base seed; falls back to the config file, then NNPROMPT_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    pub lm: LmArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ExpandArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Word vectors, one `word v1 v2 ...` per line.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Synonym lexicon, one `word<TAB>synonym` per line.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpora whose every document prefix is captured.
    #[arg(long, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Task whose prompts, domain prompt and verbalizer prefixes are captured.
    #[arg(long, requires = "dataset")]
    pub task: Option<PathBuf>,
    #[arg(long, requires = "task")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lm_seed: Option<u64>,
    #[arg(long)]
    pub lm_dim: Option<usize>,
    #[arg(long)]
    pub lm_window: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ScoringMode, String> {
    s.parse().map_err(|e: nnprompt_core::Error| e.to_string())
}

fn parse_prior(s: &str) -> Result<PmiPrior, String> {
    s.parse().map_err(|e: nnprompt_core::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<nnprompt_core::Error>())
        .map_or(3, |e| match e.kind() {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Internal => 3,
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

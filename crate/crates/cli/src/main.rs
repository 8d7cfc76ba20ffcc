//! `peret`: train, encode, retrieve, evaluate, calibrate, analyze-lengths,
//! gen-synthetic.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pe_retrieval::peft::PeMethod;
use pe_retrieval::retrievers::RetrieverKind;

#[derive(Parser)]
#[command(name = "peret", version, about = "Parameter-efficient neural retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a retriever from a run configuration file.
    Train(TrainArgs),
    /// Encode a corpus into an index file.
    Encode(EncodeArgs),
    /// Retrieve the top-k documents for every query into a TREC run file.
    Retrieve(RetrieveArgs),
    /// Score a run file against relevance judgments.
    Evaluate(EvaluateArgs),
    /// Expected calibration error and reliability diagram for a run.
    Calibrate(CalibrateArgs),
    /// nDCG@k binned by query length.
    AnalyzeLengths(AnalyzeLengthsArgs),
    /// Write a synthetic corpus, queries, qrels and training file.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// fine_tune, prefix_v2, input_prompt, adapter or bias_only.
    #[arg(long)]
    pub method: Option<PeMethod>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to encode on the fly; not needed with --index.
    #[arg(long, required_unless_present = "index")]
    pub corpus: Option<PathBuf>,
    /// Index written by `encode`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Run tag; defaults to `<retriever>-<method>`.
    #[arg(long)]
    pub tag: Option<String>,
    /// Fail unless the checkpoint is of this kind.
    #[arg(long)]
    pub retriever: Option<RetrieverKind>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Comma-separated: ndcg, top_k_accuracy.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub metrics: Vec<String>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize])]
    pub k: Vec<usize>,
    /// Answer strings (JSON lines) for answer-containment accuracy.
    #[arg(long, requires = "corpus")]
    pub answers: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = pe_retrieval::calibration::DEFAULT_BINS)]
    pub bins: usize,
    /// Reliability CSV; the diagram goes next to it as `.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeLengthsArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// nDCG cutoff.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = pe_retrieval::calibration::DEFAULT_LENGTH_BINS)]
    pub bins: usize,
    /// Equal-width length bins instead of equal-count.
    #[arg(long)]
    pub equal_width: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub num_pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::AnalyzeLengths(a) => commands::analyze_lengths(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<pe_retrieval::Error>()
                .is_some_and(pe_retrieval::Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

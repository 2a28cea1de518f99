//! `insight-rag`: reproducible commands over the insight-rag toolkit.
//!
//! Commands compose through files in the output directory:
//! ingest → extract → build-bench → index build → run → eval → report / analyze-z.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use insight_rag::retrieval::Granularity;
use insight_rag::PipelineKind;

use commands::Env;
use config::{EmbedderConfig, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "insight-rag", version, about = "Insight-driven RAG benchmark and evaluation toolkit")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

/// Mirrors of the run-config fields. Values in `--config` take precedence.
#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rebuild even if the manifest says the outputs are current.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    sample_size: Option<usize>,
    /// BFS start document; repeatable.
    #[arg(long = "bfs-seed", global = true)]
    bfs_seeds: Vec<String>,
    #[arg(long, global = true)]
    matching_pairs: Option<PathBuf>,
    #[arg(long, global = true)]
    benchmark: Option<PathBuf>,
    #[arg(long, global = true)]
    prompts_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    relation_rules: Option<PathBuf>,
    #[arg(long, global = true)]
    stoplist: Option<PathBuf>,
    /// Comma-separated: vanilla, rag_doc, rag_triple, insight.
    #[arg(long, global = true, value_delimiter = ',')]
    pipelines: Vec<PipelineKind>,
    /// Retrieved documents/triples sweep, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Vec<usize>,
    /// Mined insights sweep, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    m: Vec<usize>,
    /// Dimension of the offline hashing embedder.
    #[arg(long, global = true)]
    hashing_dim: Option<usize>,
}

impl Flags {
    fn to_config(&self) -> RunConfig {
        let list = |v: &Vec<usize>| (!v.is_empty()).then(|| v.clone());
        RunConfig {
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            parallelism: self.parallelism,
            corpus: self.corpus.clone(),
            sample_size: self.sample_size,
            bfs_seeds: (!self.bfs_seeds.is_empty()).then(|| self.bfs_seeds.clone()),
            matching_pairs: self.matching_pairs.clone(),
            benchmark: self.benchmark.clone(),
            prompts_dir: self.prompts_dir.clone(),
            relation_rules: self.relation_rules.clone(),
            stoplist: self.stoplist.clone(),
            pipelines: (!self.pipelines.is_empty()).then(|| self.pipelines.clone()),
            k: list(&self.k),
            m: list(&self.m),
            embedder: self.hashing_dim.map(|dim| EmbedderConfig::Hashing { dim }),
            models: Default::default(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the corpus, optionally BFS-sample it, and keep matching pairs inside the sample.
    Ingest,
    /// Extract, normalize and stop-list knowledge triples.
    Extract,
    /// Filter deep-insight and multi-source items, generate questions, add matching pairs.
    BuildBench,
    /// Dense retrieval indices.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Run the configured pipelines over the benchmark.
    Run,
    /// Score run records.
    Eval,
    /// Sweep table and plots from the metric reports.
    Report,
    /// Word z-scores over matching items whose correctness flipped.
    AnalyzeZ {
        /// Baseline run as pipeline:k_or_m.
        #[arg(long, default_value = "vanilla:0")]
        baseline: String,
        /// Augmented run as pipeline:k_or_m.
        #[arg(long, default_value = "insight:1")]
        augmented: String,
        #[arg(long, default_value_t = 3)]
        min_count: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

#[derive(Subcommand, Debug)]
enum IndexAction {
    /// Embed documents and linearized triples.
    Build,
    /// Print the top-k entries for a query.
    Query {
        text: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, value_parser = parse_granularity, default_value = "document")]
        granularity: Granularity,
    },
    /// Hits@K and MRR of document retrieval on the benchmark questions.
    Eval,
}

fn parse_granularity(text: &str) -> Result<Granularity, String> {
    match text {
        "document" | "doc" => Ok(Granularity::Document),
        "triple" => Ok(Granularity::Triple),
        other => Err(format!("unknown granularity {other:?}")),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let flags = cli.flags.to_config();
    let config = match &cli.flags.config {
        Some(path) => RunConfig::load(path)?.over(&flags),
        None => flags,
    };
    let env = Env::new(config, cli.flags.force)?;
    match cli.command {
        Command::Ingest => commands::ingest(&env),
        Command::Extract => commands::extract(&env),
        Command::BuildBench => commands::build_bench(&env),
        Command::Index { action } => match action {
            IndexAction::Build => commands::index_build(&env),
            IndexAction::Query { text, top, granularity } => commands::index_query(&env, granularity, &text, top),
            IndexAction::Eval => commands::index_eval(&env),
        },
        Command::Run => commands::run(&env),
        Command::Eval => commands::eval(&env),
        Command::Report => commands::report(&env),
        Command::AnalyzeZ {
            baseline,
            augmented,
            min_count,
            top,
        } => commands::analyze_z(
            &env,
            commands::parse_run_key(&baseline)?,
            commands::parse_run_key(&augmented)?,
            min_count,
            top,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

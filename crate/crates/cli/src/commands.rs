//! Command implementations. Each reads its upstream artifacts from the output
//! directory and writes its own there.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use insight_rag::benchbuild::{
    build_matching_bench, dataset_stats, emit_benchmark, filter_deep_insight, filter_multi_source, generate_question,
    load_benchmark, QuestionOutcome,
};
use insight_rag::corpus::{bfs_sample, ingest_corpus, load_matching_pairs};
use insight_rag::evalkit::{aggregate_runs, EvalError, flip_samples, sweep_report, write_scores, z_extremes, z_scores};
use insight_rag::gateway::Role;
use insight_rag::io::{read_jsonl, write_atomic, write_jsonl};
use insight_rag::pipelines::{InsightOptions, RunContext};
use insight_rag::prompts::PromptSet;
use insight_rag::retrieval::{self, eval_retriever, top_k, EmbedOptions, Granularity};
use insight_rag::triples::{extract_triples, index_triples, normalize_relations, read_triples, write_triples, StopList};
use insight_rag::{BenchmarkItem, CorpusHandle, ItemKind, MatchingItem, MetricReport, PipelineKind, RelationRules, RunRecord, Triple};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{digest_config, digest_files, Manifest};

pub const CORPUS: &str = "corpus.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const TRIPLES: &str = "triples.jsonl";
pub const BENCH: &str = "bench.jsonl";
pub const BENCH_STATS: &str = "bench_stats.json";
pub const DOC_INDEX: &str = "docs.idx";
pub const TRIPLE_INDEX: &str = "triples.idx";
pub const RETRIEVAL: &str = "retrieval.json";
pub const RUNS: &str = "runs.jsonl";
pub const METRICS: &str = "metrics.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const REPORT_DIR: &str = "report";
pub const Z_SCORES: &str = "z_scores.json";

/// Shared state for one invocation.
pub struct Env {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Env {
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { config, out, force })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An upstream artifact, or an error naming the command that writes it.
    fn upstream(&self, name: &str, what: &str, producer: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            bail!("{what} missing: {producer}");
        }
        Ok(path)
    }

    fn bench_path(&self) -> Result<PathBuf> {
        match &self.config.benchmark {
            Some(path) => Ok(path.clone()),
            None => self.upstream(BENCH, "benchmark", "build-bench"),
        }
    }

    fn prompts(&self) -> Result<PromptSet> {
        Ok(match &self.config.prompts_dir {
            Some(dir) => PromptSet::load_overrides(dir)?,
            None => PromptSet::default(),
        })
    }

    fn prompt_inputs(&self) -> Vec<PathBuf> {
        let Some(dir) = &self.config.prompts_dir else {
            return Vec::new();
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect())
            .unwrap_or_default();
        files.sort();
        files
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.config.parallelism()).build()?)
    }

    /// Runs `body` unless the manifest says its outputs are current.
    fn step(
        &self,
        command: &str,
        inputs: &[PathBuf],
        config: serde_json::Value,
        body: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let mut manifest = Manifest::open(&self.out)?;
        let inputs_digest = digest_files(inputs)?;
        let config = json!({ "command": command, "settings": config });
        let config_digest = digest_config(&config);
        if !self.force && manifest.is_current(command, &inputs_digest, &config_digest) {
            println!("{command}: up to date (use --force to rebuild)");
            return Ok(());
        }
        let artifacts = body()?;
        manifest.record(command, inputs_digest, config_digest, &artifacts)?;
        for artifact in &artifacts {
            println!("{command}: wrote {}", artifact.display());
        }
        Ok(())
    }
}

fn role_json(env: &Env, role: Role) -> serde_json::Value {
    env.config.models.get(&role).map_or(serde_json::Value::Null, |r| json!(r))
}

// ---- ingest ----

pub fn ingest(env: &Env) -> Result<()> {
    let source = env
        .config
        .corpus
        .clone()
        .ok_or_else(|| anyhow!("ingest needs a corpus (--corpus or `corpus` in the config)"))?;
    let mut inputs = vec![source.clone()];
    inputs.extend(env.config.matching_pairs.clone());
    let settings = json!({
        "sample_size": env.config.sample_size,
        "bfs_seeds": env.config.bfs_seeds,
        "seed": env.config.seed(),
    });
    env.step("ingest", &inputs, settings, || {
        let full = ingest_corpus(&source)?;
        log::info!("loaded {} documents, {} edges", full.len(), full.edge_count());
        let pairs = match &env.config.matching_pairs {
            Some(path) => {
                let load = load_matching_pairs(path, &full)?;
                if load.dropped > 0 {
                    log::warn!("{} matching pair(s) name unknown documents and were dropped", load.dropped);
                }
                load.items
            }
            None => Vec::new(),
        };
        let corpus = match env.config.sample_size {
            Some(n) if n < full.len() => {
                let graph = full.with_matching_edges(&pairs);
                let seeds = match &env.config.bfs_seeds {
                    Some(seeds) if !seeds.is_empty() => seeds.clone(),
                    _ => {
                        let ids: Vec<&str> = graph.ids().collect();
                        let pick = StdRng::seed_from_u64(env.config.seed()).gen_range(0..ids.len());
                        vec![ids[pick].to_string()]
                    }
                };
                let sample = bfs_sample(&graph, &seeds, n)?;
                full.subset(sample.iter().map(String::as_str))?
            }
            _ => full,
        };
        let corpus_path = env.path(CORPUS);
        corpus.write(&corpus_path)?;
        let kept: Vec<MatchingItem> = pairs
            .into_iter()
            .filter(|p| corpus.contains(&p.doc_a) && corpus.contains(&p.doc_b))
            .collect();
        let pairs_path = env.path(PAIRS);
        write_jsonl(&pairs_path, &kept)?;
        println!(
            "ingest: {} documents (mean {:.1} tokens), {} matching pairs",
            corpus.len(),
            corpus.mean_token_count(),
            kept.len()
        );
        Ok(vec![corpus_path, pairs_path])
    })
}

fn load_corpus(env: &Env) -> Result<(PathBuf, CorpusHandle)> {
    let path = env.upstream(CORPUS, "corpus", "ingest")?;
    let corpus = ingest_corpus(&path)?;
    Ok((path, corpus))
}

// ---- extract ----

pub fn extract(env: &Env) -> Result<()> {
    let (corpus_path, corpus) = load_corpus(env)?;
    let mut inputs = vec![corpus_path];
    inputs.extend(env.config.relation_rules.clone());
    inputs.extend(env.config.stoplist.clone());
    inputs.extend(env.prompt_inputs());
    let settings = json!({ "extractor": role_json(env, Role::Extractor) });
    env.step("extract", &inputs, settings, || {
        let extractor = env.config.gateway(Role::Extractor, &[])?;
        let prompts = env.prompts()?;
        let docs: Vec<_> = corpus.documents().collect();
        let extractions = env.pool()?.install(|| {
            docs.par_iter()
                .map(|doc| extract_triples(doc, &extractor, &prompts))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let skipped: usize = extractions.iter().map(|e| e.skipped).sum();
        let raw: Vec<Triple> = extractions.into_iter().flat_map(|e| e.triples).collect();
        let rules = match &env.config.relation_rules {
            Some(path) => RelationRules::load(path, true, true)?,
            None => RelationRules::default(),
        };
        let stoplist = match &env.config.stoplist {
            Some(path) => StopList::load(path)?,
            None => StopList::default(),
        };
        let (triples, dropped) = stoplist.filter(normalize_relations(&raw, &rules));
        let path = env.path(TRIPLES);
        write_triples(&path, &triples)?;
        println!(
            "extract: {} triples from {} documents ({} unparseable lines, {} stop-listed)",
            triples.len(),
            corpus.len(),
            skipped,
            dropped
        );
        Ok(vec![path])
    })
}

// ---- build-bench ----

pub fn build_bench(env: &Env) -> Result<()> {
    let (corpus_path, corpus) = load_corpus(env)?;
    let triples_path = env.upstream(TRIPLES, "triples", "extract")?;
    let pairs_path = env.path(PAIRS);
    let mut inputs = vec![corpus_path, triples_path.clone()];
    if pairs_path.exists() {
        inputs.push(pairs_path.clone());
    }
    inputs.extend(env.prompt_inputs());
    let settings = json!({ "qgen": role_json(env, Role::Qgen) });
    env.step("build-bench", &inputs, settings, || {
        let triples = read_triples(&triples_path)?;
        let index = index_triples(&triples);
        let mut candidates = filter_deep_insight(&index, &corpus);
        candidates.extend(filter_multi_source(&index));
        let qgen = env.config.gateway(Role::Qgen, &[])?;
        let prompts = env.prompts()?;
        let outcomes = env.pool()?.install(|| {
            candidates
                .par_iter()
                .map(|item| generate_question(item, &qgen, &prompts))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut items = Vec::new();
        let mut dropped = 0;
        for outcome in outcomes {
            match outcome {
                QuestionOutcome::Generated(item) => items.push(item),
                QuestionOutcome::Dropped { id, reason } => {
                    log::debug!("dropped {id}: {reason:?}");
                    dropped += 1;
                }
            }
        }
        if pairs_path.exists() {
            let pairs: Vec<MatchingItem> = read_jsonl(&pairs_path)?;
            items.extend(build_matching_bench(&pairs));
        }
        let bench_path = env.path(BENCH);
        emit_benchmark(&items, &bench_path)?;
        let stats = dataset_stats(&items);
        let stats_path = env.path(BENCH_STATS);
        let body = json!({ "triples": triples.len(), "deep": stats.deep, "multi": stats.multi, "matching": stats.matching, "dropped_questions": dropped });
        write_atomic(&stats_path, format!("{}\n", serde_json::to_string_pretty(&body)?).as_bytes())?;
        println!(
            "build-bench: {} deep, {} multi-source, {} matching ({} questions dropped)",
            stats.deep, stats.multi, stats.matching, dropped
        );
        Ok(vec![bench_path, stats_path])
    })
}

// ---- index ----

fn triple_items(triples: &[Triple]) -> Vec<(String, String)> {
    triples.iter().enumerate().map(|(i, t)| (format!("t{i:06}"), t.linearize())).collect()
}

pub fn index_build(env: &Env) -> Result<()> {
    let (corpus_path, corpus) = load_corpus(env)?;
    let triples_path = env.upstream(TRIPLES, "triples", "extract")?;
    let settings = json!({ "embedder": env.config.embedder() });
    env.step("index-build", &[corpus_path, triples_path.clone()], settings, || {
        let embedder = env.config.embedder().build()?;
        let options = EmbedOptions {
            parallelism: env.config.parallelism(),
            ..EmbedOptions::default()
        };
        let docs: Vec<(String, String)> = corpus.documents().map(|d| (d.id.clone(), d.abstract_text.clone())).collect();
        let triples = triple_items(&read_triples(&triples_path)?);
        let mut written = Vec::new();
        for (name, items, granularity) in [
            (DOC_INDEX, &docs, Granularity::Document),
            (TRIPLE_INDEX, &triples, Granularity::Triple),
        ] {
            let path = env.path(name);
            let index = retrieval::build_index::<f32>(items, granularity, embedder.as_ref(), &options)?;
            index.save(&path)?;
            println!("index: {} {granularity} vectors (dim {})", index.len(), index.dim());
            written.push(insight_rag::VectorIndex::manifest_path(&path));
            written.push(path);
        }
        Ok(written)
    })
}

fn load_index(env: &Env, granularity: Granularity) -> Result<insight_rag::VectorIndex> {
    let name = match granularity {
        Granularity::Document => DOC_INDEX,
        Granularity::Triple => TRIPLE_INDEX,
    };
    let path = env.upstream(name, &format!("{granularity} index"), "index build")?;
    Ok(insight_rag::VectorIndex::load(&path)?)
}

pub fn index_query(env: &Env, granularity: Granularity, text: &str, k: usize) -> Result<()> {
    let index = load_index(env, granularity)?;
    let embedder = env.config.embedder().build()?;
    let result = top_k(&index, text, k, embedder.as_ref())?;
    for (rank, (key, score)) in result.ranked.iter().enumerate() {
        let line = json!({ "rank": rank + 1, "key": key, "score": score, "payload": index.payload(key) });
        println!("{line}");
    }
    Ok(())
}

pub fn index_eval(env: &Env) -> Result<()> {
    let bench_path = env.bench_path()?;
    let index_path = env.upstream(DOC_INDEX, "document index", "index build")?;
    let settings = json!({ "k": env.config.k(), "embedder": env.config.embedder() });
    env.step("index-eval", &[bench_path.clone(), index_path], settings, || {
        let bench = load_benchmark(&bench_path)?;
        let index = load_index(env, Granularity::Document)?;
        let embedder = env.config.embedder().build()?;
        let ks = env.config.k();
        let k_max = ks.iter().copied().max().unwrap_or(1);
        let report = eval_retriever::<f64>(&bench, &widen(&index), embedder.as_ref(), &ks, k_max)?;
        for (label, agg) in [("deep", &report.deep), ("multi", &report.multi)] {
            if let Some(agg) = agg {
                let hits: Vec<String> = agg.hits.iter().map(|(k, v)| format!("Hits@{k} {v:.4}")).collect();
                println!("index eval {label} ({} items): {} MRR {:.4}", agg.count, hits.join(" "), agg.mrr);
            }
        }
        let path = env.path(RETRIEVAL);
        write_atomic(&path, format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes())?;
        Ok(vec![path])
    })
}

/// Widens stored single-precision vectors so retrieval metrics are computed
/// in double precision.
fn widen(index: &insight_rag::VectorIndex) -> insight_rag::VectorIndexF64 {
    let entries = index
        .entries()
            .iter()
            .map(|e| retrieval::IndexEntry {
                key: e.key.clone(),
                vector: e.vector.iter().map(|&v| f64::from(v)).collect(),
                payload: e.payload.clone(),
            })
            .collect();
    retrieval::VectorIndex::from_entries(index.granularity(), index.embedder_id(), index.digest(), entries)
        .expect("entries came from a valid index")
}

// ---- run ----

pub fn run(env: &Env) -> Result<()> {
    let bench_path = env.bench_path()?;
    let pipelines = env.config.pipelines();
    let (corpus_path, corpus) = load_corpus(env)?;
    let mut inputs = vec![bench_path.clone(), corpus_path];
    if pipelines.contains(&PipelineKind::RagDoc) {
        inputs.push(env.upstream(DOC_INDEX, "document index", "index build")?);
    }
    if pipelines.contains(&PipelineKind::RagTriple) {
        inputs.push(env.upstream(TRIPLE_INDEX, "triple index", "index build")?);
    }
    inputs.extend(env.prompt_inputs());
    let settings = json!({
        "pipelines": pipelines,
        "k": env.config.k(),
        "m": env.config.m(),
        "embedder": env.config.embedder(),
        "identifier": role_json(env, Role::Identifier),
        "miner": role_json(env, Role::Miner),
        "generator": role_json(env, Role::Generator),
    });
    env.step("run", &inputs, settings, || {
        let bench = load_benchmark(&bench_path)?;
        let prompts = env.prompts()?;
        let generator = env.config.gateway(Role::Generator, &bench)?;
        let insight = pipelines.contains(&PipelineKind::Insight);
        let identifier = if insight { Some(env.config.gateway(Role::Identifier, &bench)?) } else { None };
        let miner = if insight { Some(env.config.gateway(Role::Miner, &bench)?) } else { None };
        let doc_index = if pipelines.contains(&PipelineKind::RagDoc) { Some(load_index(env, Granularity::Document)?) } else { None };
        let triple_index = if pipelines.contains(&PipelineKind::RagTriple) { Some(load_index(env, Granularity::Triple)?) } else { None };
        let embedder = if doc_index.is_some() || triple_index.is_some() { Some(env.config.embedder().build()?) } else { None };
        let ctx = RunContext {
            prompts: &prompts,
            generator: &generator,
            identifier: identifier.as_ref(),
            miner: miner.as_ref(),
            corpus: Some(&corpus),
            doc_index: doc_index.as_ref(),
            triple_index: triple_index.as_ref(),
            embedder: embedder.as_deref(),
            options: InsightOptions::default(),
        };
        let qa: Vec<BenchmarkItem> = bench.iter().filter(|i| i.kind != ItemKind::Matching).cloned().collect();
        let parallelism = env.config.parallelism();
        let mut records: Vec<RunRecord> = Vec::new();
        for pipeline in &pipelines {
            let (items, sweep) = match pipeline {
                PipelineKind::Vanilla => (&bench, vec![0]),
                PipelineKind::RagDoc => (&bench, env.config.k()),
                // triple retrieval has no matching-task formulation
                PipelineKind::RagTriple => (&qa, env.config.k()),
                PipelineKind::Insight => (&bench, env.config.m()),
            };
            for k_or_m in sweep {
                let batch = ctx.run_all(items, *pipeline, k_or_m, parallelism);
                let failed = batch.iter().filter(|r| r.error.is_some()).count();
                if failed > 0 {
                    log::warn!("{pipeline} {k_or_m}: {failed} item(s) failed");
                }
                println!("run: {pipeline} k_or_m={k_or_m} on {} items", batch.len());
                records.extend(batch);
            }
        }
        let path = env.path(RUNS);
        write_jsonl(&path, &records)?;
        Ok(vec![path])
    })
}

// ---- eval / report ----

fn load_runs(env: &Env) -> Result<(PathBuf, Vec<RunRecord>)> {
    let path = env.upstream(RUNS, "run records", "run")?;
    let records = read_jsonl(&path)?;
    Ok((path, records))
}

pub fn eval(env: &Env) -> Result<()> {
    let (runs_path, records) = load_runs(env)?;
    let bench_path = env.bench_path()?;
    env.step("eval", &[runs_path, bench_path.clone()], json!({}), || {
        let bench = load_benchmark(&bench_path)?;
        let reports = aggregate_runs::<f64>(&records, &bench)?;
        let metrics_path = env.path(METRICS);
        write_jsonl(&metrics_path, &reports)?;
        let scores_path = env.path(SCORES);
        write_scores(&reports, &scores_path)?;
        print!("{}", insight_rag::evalkit::sweep_table(&reports));
        Ok(vec![metrics_path, scores_path])
    })
}

pub fn report(env: &Env) -> Result<()> {
    let metrics_path = env.upstream(METRICS, "metric reports", "eval")?;
    env.step("report", std::slice::from_ref(&metrics_path), json!({}), || {
        let reports: Vec<MetricReport> = read_jsonl(&metrics_path)?;
        let files = sweep_report(&reports, &env.path(REPORT_DIR))?;
        let mut written = vec![files.table];
        written.extend(files.plots);
        Ok(written)
    })
}

/// `pipeline:k_or_m`, e.g. `insight:1`.
pub fn parse_run_key(text: &str) -> Result<(PipelineKind, usize)> {
    let (pipeline, k) = text.split_once(':').unwrap_or((text, "0"));
    let pipeline = pipeline.parse::<PipelineKind>().map_err(|e| anyhow!(e))?;
    let k = k.parse::<usize>().with_context(|| format!("bad k_or_m in {text:?}"))?;
    Ok((pipeline, k))
}

pub fn analyze_z(env: &Env, baseline: (PipelineKind, usize), augmented: (PipelineKind, usize), min_count: usize, top: usize) -> Result<()> {
    let (runs_path, records) = load_runs(env)?;
    let bench_path = env.bench_path()?;
    let settings = json!({ "baseline": [baseline.0, baseline.1], "augmented": [augmented.0, augmented.1], "min_count": min_count, "top": top });
    env.step("analyze-z", &[runs_path, bench_path.clone()], settings, || {
        let bench = load_benchmark(&bench_path)?;
        let pick = |(pipeline, k): (PipelineKind, usize)| -> Vec<RunRecord> {
            records.iter().filter(|r| r.pipeline == pipeline && r.k_or_m == k).cloned().collect()
        };
        let (base, aug) = (pick(baseline), pick(augmented));
        if base.is_empty() || aug.is_empty() {
            bail!("run records missing for {}:{} or {}:{}: run", baseline.0, baseline.1, augmented.0, augmented.1);
        }
        let samples = flip_samples(&base, &aug, &bench)?;
        let rows = match z_scores::<f64>(&samples, min_count) {
            Ok(rows) => rows,
            // no flips, or flips in one direction only: nothing to contrast
            Err(EvalError::DegeneratePrior) => {
                println!("analyze-z: {} flipped item(s), all with the same label; no z-scores", samples.len());
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        let (positive, negative) = z_extremes(&rows, top);
        for row in &positive {
            println!("+ {:<24} z={:+.3} n={}", row.word, row.z, row.n);
        }
        for row in &negative {
            println!("- {:<24} z={:+.3} n={}", row.word, row.z, row.n);
        }
        let body = json!({ "samples": samples.len(), "positive": positive, "negative": negative, "rows": rows });
        let path = env.path(Z_SCORES);
        write_atomic(&path, format!("{}\n", serde_json::to_string_pretty(&body)?).as_bytes())?;
        Ok(vec![path])
    })
}

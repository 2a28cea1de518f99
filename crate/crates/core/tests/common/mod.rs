//! Fixtures shared by the integration tests: a synthetic abstract world with
//! planted facts, a full mock-stack run, and second implementations of the
//! metrics written directly from their definitions.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use insight_rag::benchbuild::{
    build_matching_bench, emit_benchmark, filter_deep_insight, filter_multi_source, generate_question, QuestionOutcome,
};
use insight_rag::corpus::{bfs_sample, ingest_corpus, Document, MatchingItem};
use insight_rag::evalkit::{aggregate_runs, flip_samples, sweep_report, write_scores, z_scores};
use insight_rag::gateway::{ChatBackend, Gateway, ModelHandle, Role};
use insight_rag::io::write_jsonl;
use insight_rag::pipelines::mocks::{extractive_generator, oracle_identifier, oracle_miner, sentence_extractor, template_qgen};
use insight_rag::pipelines::{InsightOptions, PipelineKind, RunContext, RunRecord};
use insight_rag::prompts::PromptSet;
use insight_rag::retrieval::{build_index, EmbedOptions, Granularity, HashingEmbedder};
use insight_rag::triples::{extract_triples, index_triples, normalize_relations, write_triples, StopList};
use insight_rag::{BenchmarkItem, CorpusHandle, ItemKind, RelationRules, Triple};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn gateway(role: Role, backend: impl ChatBackend + 'static) -> Gateway {
    Gateway::new(ModelHandle::mock(role), Arc::new(backend)).unwrap()
}

/// A made-up term `zq<letters a..p>x`. No term is a substring of another,
/// and none occurs inside ordinary English filler.
pub fn term(i: usize) -> String {
    let mut body = Vec::new();
    let mut n = i;
    for _ in 0..3 {
        body.push((b'a' + (n % 16) as u8) as char);
        n /= 16;
    }
    while n > 0 {
        body.push((b'a' + (n % 16) as u8) as char);
        n /= 16;
    }
    format!("zq{}x", body.into_iter().collect::<String>())
}

const FILLER: &[&str] = &[
    "we", "evaluate", "the", "proposed", "framework", "on", "several", "benchmarks", "and", "observe", "consistent",
    "gains", "over", "strong", "baselines", "results", "indicate", "robust", "behaviour", "across", "settings",
];

pub struct World {
    pub corpus: CorpusHandle,
    pub triples: Vec<Triple>,
}

/// `n_docs` abstracts, each stating one deep fact `S_i uses O_i` and one
/// group fact `M_g includes P_i` shared by blocks of four documents, padded
/// with `filler` random filler words.
pub fn synth_world(n_docs: usize, filler: usize, seed: u64) -> World {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut triples = Vec::new();
    for i in 0..n_docs {
        let id = format!("d{i:04}");
        let (s, o) = (term(i), term(10_000 + i));
        let (m, p) = (term(20_000 + i / 4), term(30_000 + i));
        let pad: Vec<&str> = (0..filler).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
        let abstract_text = format!("{s} uses {o} for structured prediction. In addition {m} includes {p}. {}.", pad.join(" "));
        let mut neighbors = BTreeSet::new();
        if i + 1 < n_docs {
            neighbors.insert(format!("d{:04}", i + 1));
        }
        docs.push(Document {
            id: id.clone(),
            title: format!("Study {i}"),
            abstract_text,
            neighbors,
            token_count: 0,
        });
        triples.push(Triple::new(&s, "uses", &o, &id));
        triples.push(Triple::new(&m, "includes", &p, &id));
    }
    World {
        corpus: CorpusHandle::from_documents(docs, "synthetic").unwrap(),
        triples,
    }
}

/// Deep and multi items from `triples`, with template questions.
pub fn question_bench(corpus: &CorpusHandle, triples: &[Triple]) -> Vec<BenchmarkItem> {
    let index = index_triples(&normalize_relations(triples, &RelationRules::default()));
    let qgen = gateway(Role::Qgen, template_qgen());
    let prompts = PromptSet::default();
    filter_deep_insight(&index, corpus)
        .into_iter()
        .chain(filter_multi_source(&index))
        .filter_map(|item| match generate_question(&item, &qgen, &prompts).unwrap() {
            QuestionOutcome::Generated(item) => Some(item),
            QuestionOutcome::Dropped { .. } => None,
        })
        .collect()
}

/// The whole offline workflow on a small synthetic corpus with mock models,
/// writing every artifact under `dir`. Returns the written files.
pub fn full_run(dir: &Path) -> Vec<PathBuf> {
    let world = synth_world(40, 15, 11);
    let corpus_path = dir.join("corpus.jsonl");
    world.corpus.write(&corpus_path).unwrap();
    let corpus = ingest_corpus(&corpus_path).unwrap();
    let sample = bfs_sample(&corpus, &["d0000".to_string()], 32).unwrap();
    let corpus = corpus.subset(sample.iter().map(String::as_str)).unwrap();

    let prompts = PromptSet::default();
    let extractor = gateway(Role::Extractor, sentence_extractor());
    let mut raw = Vec::new();
    for doc in corpus.documents() {
        raw.extend(extract_triples(doc, &extractor, &prompts).unwrap().triples);
    }
    let (triples, _) = StopList::default().filter(normalize_relations(&raw, &RelationRules::default()));
    let triples_path = dir.join("triples.jsonl");
    write_triples(&triples_path, &triples).unwrap();

    let mut bench = question_bench(&corpus, &triples);
    let ids: Vec<&str> = corpus.ids().collect();
    let pairs: Vec<MatchingItem> = (0..8)
        .map(|i| MatchingItem {
            doc_a: ids[i].to_string(),
            doc_b: ids[if i % 2 == 0 { i + 1 } else { i + 12 }].to_string(),
            label: i % 2 == 0,
        })
        .collect();
    bench.extend(build_matching_bench(&pairs));
    let bench_path = dir.join("bench.jsonl");
    emit_benchmark(&bench, &bench_path).unwrap();

    let embedder = HashingEmbedder::new(64);
    let doc_items: Vec<(String, String)> = corpus.documents().map(|d| (d.id.clone(), d.abstract_text.clone())).collect();
    let triple_items: Vec<(String, String)> = triples.iter().enumerate().map(|(i, t)| (format!("t{i:05}"), t.linearize())).collect();
    let doc_index = build_index::<f32>(&doc_items, Granularity::Document, &embedder, &EmbedOptions::default()).unwrap();
    let triple_index = build_index::<f32>(&triple_items, Granularity::Triple, &embedder, &EmbedOptions::default()).unwrap();
    doc_index.save(&dir.join("docs.idx")).unwrap();
    triple_index.save(&dir.join("triples.idx")).unwrap();

    let identifier = gateway(Role::Identifier, oracle_identifier(&bench));
    let miner = gateway(Role::Miner, oracle_miner(&bench));
    let generator = gateway(Role::Generator, extractive_generator());
    let ctx = RunContext {
        prompts: &prompts,
        generator: &generator,
        identifier: Some(&identifier),
        miner: Some(&miner),
        corpus: Some(&corpus),
        doc_index: Some(&doc_index),
        triple_index: Some(&triple_index),
        embedder: Some(&embedder),
        options: InsightOptions::default(),
    };
    let qa: Vec<BenchmarkItem> = bench.iter().filter(|i| i.kind != ItemKind::Matching).cloned().collect();
    let matching: Vec<BenchmarkItem> = bench.iter().filter(|i| i.kind == ItemKind::Matching).cloned().collect();
    let mut records: Vec<RunRecord> = Vec::new();
    records.extend(ctx.run_all(&bench, PipelineKind::Vanilla, 0, 4));
    for k in [1, 3] {
        records.extend(ctx.run_all(&bench, PipelineKind::RagDoc, k, 4));
        records.extend(ctx.run_all(&qa, PipelineKind::RagTriple, k, 4));
    }
    for m in [1, 2] {
        records.extend(ctx.run_all(&bench, PipelineKind::Insight, m, 4));
    }
    let runs_path = dir.join("runs.jsonl");
    write_jsonl(&runs_path, &records).unwrap();

    let reports = aggregate_runs::<f64>(&records, &bench).unwrap();
    let files = sweep_report(&reports, &dir.join("report")).unwrap();
    let scores_path = dir.join("report").join("scores.jsonl");
    write_scores(&reports, &scores_path).unwrap();

    let pick = |kind: PipelineKind, k: usize| -> Vec<RunRecord> {
        records
            .iter()
            .filter(|r| r.pipeline == kind && r.k_or_m == k && matching.iter().any(|i| i.id == r.item_id))
            .cloned()
            .collect()
    };
    let flips = flip_samples(&pick(PipelineKind::Vanilla, 0), &pick(PipelineKind::Insight, 1), &bench).unwrap();
    let z_path = dir.join("report").join("z.json");
    let z = z_scores::<f64>(&flips, 1).map(|rows| serde_json::to_string_pretty(&rows).unwrap());
    std::fs::write(&z_path, z.unwrap_or_else(|e| e.to_string())).unwrap();

    let mut out = vec![corpus_path, triples_path, bench_path, dir.join("docs.idx"), dir.join("triples.idx"), runs_path];
    out.push(files.table);
    out.extend(files.plots);
    out.push(scores_path);
    out.push(z_path);
    out
}

// ---- second implementations ----

fn oracle_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub fn oracle_em(golds: &[String], pred: &str) -> f64 {
    let padded = format!(" {} ", oracle_tokens(pred).join(" "));
    let hits = golds
        .iter()
        .filter(|g| {
            let g = oracle_tokens(g);
            if g.is_empty() {
                padded.trim().is_empty()
            } else {
                padded.contains(&format!(" {} ", g.join(" ")))
            }
        })
        .count();
    hits as f64 / golds.len() as f64
}

pub fn oracle_f1(golds: &[String], pred: &str) -> f64 {
    let p = oracle_tokens(pred);
    let per_gold = golds.iter().map(|g| {
        let g = oracle_tokens(g);
        if g.is_empty() && p.is_empty() {
            return 1.0;
        }
        let mut bag: BTreeMap<&str, i64> = BTreeMap::new();
        for t in &g {
            *bag.entry(t).or_default() += 1;
        }
        let mut pred_bag: BTreeMap<&str, i64> = BTreeMap::new();
        for t in &p {
            *pred_bag.entry(t).or_default() += 1;
        }
        let overlap: i64 = bag.iter().map(|(t, c)| (*c).min(*pred_bag.get(t).unwrap_or(&0))).sum();
        if overlap == 0 {
            return 0.0;
        }
        let precision = overlap as f64 / p.len() as f64;
        let recall = overlap as f64 / g.len() as f64;
        2.0 * precision * recall / (precision + recall)
    });
    per_gold.sum::<f64>() / golds.len() as f64
}

/// Non-overlapping, case-insensitive, whitespace-collapsed occurrence count.
pub fn oracle_count(haystack: &str, needle: &str) -> usize {
    let squash = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let needle = squash(needle);
    if needle.is_empty() {
        return 0;
    }
    squash(haystack).matches(needle.as_str()).count()
}

/// (word, n, p_hat, z) straight from the formula.
pub fn oracle_z(samples: &[(String, bool)], min_count: usize) -> BTreeMap<String, (usize, f64, f64)> {
    let word_re = regex::Regex::new(r"[a-z]+").unwrap();
    let sets: Vec<BTreeSet<String>> = samples
        .iter()
        .map(|(t, _)| word_re.find_iter(&t.to_lowercase()).map(|m| m.as_str().to_string()).collect())
        .collect();
    let vocab: BTreeSet<&String> = sets.iter().flatten().collect();
    let p0 = samples.iter().filter(|(_, l)| *l).count() as f64 / samples.len() as f64;
    let mut out = BTreeMap::new();
    for word in vocab {
        let with: Vec<bool> = samples
            .iter()
            .zip(&sets)
            .filter(|(_, set)| set.contains(word))
            .map(|((_, l), _)| *l)
            .collect();
        let n = with.len();
        if n < min_count.max(1) {
            continue;
        }
        let p_hat = with.iter().filter(|l| **l).count() as f64 / n as f64;
        let z = (p_hat - p0) / (p0 * (1.0 - p0) / n as f64).sqrt();
        out.insert(word.clone(), (n, p_hat, z));
    }
    out
}

pub fn random_word(rng: &mut StdRng, alphabet: &[&str]) -> String {
    alphabet[rng.gen_range(0..alphabet.len())].to_string()
}

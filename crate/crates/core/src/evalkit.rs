//! Answer metrics, miner recall, judged insight similarity, lexical z-scores,
//! and sweep reports.
//!
//! Answers and golds are compared after normalization: case-folded, split
//! into maximal alphanumeric runs. A gold counts as contained in a
//! prediction when its token sequence occurs contiguously in the
//! prediction's tokens. Articles are kept.

mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::benchbuild::{BenchmarkItem, ItemKind};
use crate::gateway::{ChatMessage, Gateway, GatewayError};
use crate::pipelines::{PipelineKind, RunRecord};
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::scalar::{mean, Scalar};

pub use report::{sweep_report, sweep_table, write_scores, SweepFiles};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records")]
    NoRecords,
    #[error("record references unknown item {0}")]
    UnknownItem(String),
    #[error("records mix runs: {0}")]
    MixedRuns(String),
    #[error("degenerate label prior")]
    DegeneratePrior,
    #[error("judge: unparseable score after retry: {raw:?}")]
    Judge { raw: String },
    #[error("judge: {0}")]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("plot {path}: {message}")]
    Plot { path: String, message: String },
}

/// Case-folded alphanumeric tokens.
pub fn answer_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Normalized display form: the tokens joined by single spaces.
pub fn normalize_answer(text: &str) -> String {
    answer_tokens(text).join(" ")
}

fn contains_tokens(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return haystack.is_empty();
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Whether `gold` appears in `pred` after normalization.
pub fn gold_in(gold: &str, pred: &str) -> bool {
    contains_tokens(&answer_tokens(pred), &answer_tokens(gold))
}

/// Containment exact match, averaged over golds. An empty gold list scores 0.
pub fn exact_match<T: Scalar>(golds: &[String], pred: &str) -> T {
    if golds.is_empty() {
        return T::zero();
    }
    let pred = answer_tokens(pred);
    let hits = golds
        .iter()
        .filter(|g| contains_tokens(&pred, &answer_tokens(g)))
        .count();
    T::from_count(hits) / T::from_count(golds.len())
}

fn token_f1<T: Scalar>(gold: &[String], pred: &[String]) -> T {
    if gold.is_empty() || pred.is_empty() {
        return if gold.is_empty() && pred.is_empty() {
            T::one()
        } else {
            T::zero()
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return T::zero();
    }
    let precision = T::from_count(overlap) / T::from_count(pred.len());
    let recall = T::from_count(overlap) / T::from_count(gold.len());
    T::lit(2.0) * precision * recall / (precision + recall)
}

/// Token F1, averaged over golds. An empty gold list scores 0.
pub fn f1<T: Scalar>(golds: &[String], pred: &str) -> T {
    if golds.is_empty() {
        return T::zero();
    }
    let pred = answer_tokens(pred);
    let total = golds
        .iter()
        .map(|g| token_f1::<T>(&answer_tokens(g), &pred))
        .fold(T::zero(), |a, b| a + b);
    total / T::from_count(golds.len())
}

/// Fraction of golds contained in any of the first `k` completions.
pub fn miner_recall_at_k<T: Scalar>(golds: &[String], completions: &[String], k: usize) -> T {
    if golds.is_empty() {
        return T::zero();
    }
    let window: Vec<Vec<String>> = completions.iter().take(k.max(1)).map(|c| answer_tokens(c)).collect();
    let found = golds
        .iter()
        .filter(|g| {
            let g = answer_tokens(g);
            window.iter().any(|c| contains_tokens(c, &g))
        })
        .count();
    T::from_count(found) / T::from_count(golds.len())
}

/// Miner quality on the benchmark's gold fragments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerReport<T> {
    /// Exact match of the single greedy completion on deep items.
    pub deep_em: Option<T>,
    /// Recall@k of `k` sampled completions on multi items.
    pub multi_recall: Option<T>,
    pub k: usize,
    pub deep_count: usize,
    pub multi_count: usize,
}

/// Completes every item's gold fragment and scores the completions.
pub fn evaluate_miner<T: Scalar>(items: &[BenchmarkItem], miner: &Gateway, k: usize) -> Result<MinerReport<T>, GatewayError> {
    let mut deep = Vec::new();
    let mut multi = Vec::new();
    for item in items {
        let Some(fragment) = item.gold_insight() else {
            continue;
        };
        match item.kind {
            ItemKind::Deep => {
                let out = miner.complete_insight(&fragment, 1)?;
                deep.push(exact_match::<T>(&item.golds, &out[0].text));
            }
            ItemKind::Multi => {
                let outs: Vec<String> = miner.complete_insight(&fragment, k)?.into_iter().map(|o| o.text).collect();
                multi.push(miner_recall_at_k::<T>(&item.golds, &outs, k));
            }
            ItemKind::Matching => {}
        }
    }
    Ok(MinerReport {
        deep_em: mean(&deep),
        multi_recall: mean(&multi),
        k,
        deep_count: deep.len(),
        multi_count: multi.len(),
    })
}

const JUDGE_REPROMPT: &str = "Provide only the similarity score in the format \"Score: <0, 0.5, or 1>\".";

/// Reads `Score: 0 | 0.5 | 1` from a judge reply.
pub fn parse_judge_score(raw: &str) -> Option<f64> {
    static SCORE: OnceLock<Regex> = OnceLock::new();
    let re = SCORE.get_or_init(|| Regex::new(r"(?i)score\W{0,3}\s*([01](?:\.\d+)?|\.5)").expect("valid regex"));
    let value: f64 = re.captures(raw)?[1].parse().ok()?;
    [0.0, 0.5, 1.0].into_iter().find(|v| (v - value).abs() < 1e-9)
}

/// Asks the judge how similar a generated insight is to the target
/// (gold subject and relation); one reprompt on an unreadable reply.
pub fn judge_insight_similarity<T: Scalar>(
    target: &str,
    generated: &str,
    judge: &Gateway,
    prompts: &PromptSet,
) -> Result<T, EvalError> {
    let prompt = prompts.render(PromptKind::InsightEval, &[target, generated])?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let raw = judge.chat(&messages)?.text;
    if let Some(score) = parse_judge_score(&raw) {
        return Ok(T::lit(score));
    }
    messages.push(ChatMessage::assistant(raw));
    messages.push(ChatMessage::user(JUDGE_REPROMPT));
    let raw = judge.chat(&messages)?.text;
    parse_judge_score(&raw)
        .map(T::lit)
        .ok_or(EvalError::Judge { raw })
}

/// One word's association with the positive label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZRow<T> {
    pub word: String,
    /// Samples containing the word.
    pub n: usize,
    /// Fraction of those samples labelled 1.
    pub p_hat: T,
    pub z: T,
}

/// Lowercase alphabetic words, each once.
pub fn z_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// One-proportion z statistic of each word's presence against the label
/// prior, for words present in at least `min_count` samples. Sorted by z
/// descending, ties by word.
pub fn z_scores<T: Scalar>(samples: &[(String, bool)], min_count: usize) -> Result<Vec<ZRow<T>>, EvalError> {
    let total = samples.len();
    let positives = samples.iter().filter(|(_, l)| *l).count();
    if positives == 0 || positives == total {
        return Err(EvalError::DegeneratePrior);
    }
    let p0 = T::from_count(positives) / T::from_count(total);
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (text, label) in samples {
        for word in z_tokens(text) {
            let entry = counts.entry(word).or_default();
            entry.0 += 1;
            entry.1 += usize::from(*label);
        }
    }
    let spread = p0 * (T::one() - p0);
    let mut rows: Vec<ZRow<T>> = counts
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count.max(1))
        .map(|(word, (n, pos))| {
            let p_hat = T::from_count(pos) / T::from_count(n);
            let z = (p_hat - p0) / (spread / T::from_count(n)).sqrt();
            ZRow { word, n, p_hat, z }
        })
        .collect();
    rows.sort_by(|a, b| b.z.partial_cmp(&a.z).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.word.cmp(&b.word)));
    Ok(rows)
}

/// The `n` most positive and `n` most negative rows (the latter most
/// negative first).
pub fn z_extremes<T: Scalar>(rows: &[ZRow<T>], n: usize) -> (Vec<ZRow<T>>, Vec<ZRow<T>>) {
    let top = rows.iter().take(n).cloned().collect();
    let bottom = rows.iter().rev().take(n).cloned().collect();
    (top, bottom)
}

fn matching_correct(item: &BenchmarkItem, answer: &str) -> Option<bool> {
    let label = item.pair.as_ref()?.label;
    Some(answer.eq_ignore_ascii_case(if label { "yes" } else { "no" }))
}

/// Labels matching items whose correctness changed between a baseline run
/// and an insight-augmented run: 1 for incorrect→correct, 0 for the reverse.
/// The text of each sample is its identified insight fragments.
pub fn flip_samples(
    baseline: &[RunRecord],
    augmented: &[RunRecord],
    bench: &[BenchmarkItem],
) -> Result<Vec<(String, bool)>, EvalError> {
    let items: HashMap<&str, &BenchmarkItem> = bench.iter().map(|i| (i.id.as_str(), i)).collect();
    let base: HashMap<&str, &RunRecord> = baseline.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let mut samples = Vec::new();
    for record in augmented {
        let item = items
            .get(record.item_id.as_str())
            .ok_or_else(|| EvalError::UnknownItem(record.item_id.clone()))?;
        let Some(before) = base.get(record.item_id.as_str()) else {
            continue;
        };
        let (Some(was), Some(now)) = (
            matching_correct(item, &before.parsed_answer),
            matching_correct(item, &record.parsed_answer),
        ) else {
            continue;
        };
        if was != now {
            let text = record
                .insights
                .iter()
                .map(|t| t.insight.fragment.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            samples.push((text, now));
        }
    }
    Ok(samples)
}

/// Scores for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore<T> {
    pub item_id: String,
    pub kind: ItemKind,
    /// Exact match (averaged over golds for multi items); matching: 1 if correct.
    pub em: T,
    /// Token F1 (averaged over golds for multi items); matching: 1 if correct.
    pub f1: T,
    pub fallback: bool,
    pub failed: bool,
}

/// Means over the items of one kind; `None` when the run has none.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates<T> {
    /// Deep items.
    pub em: Option<T>,
    pub f1: Option<T>,
    /// Multi items, averaged over golds within each item.
    pub a_em: Option<T>,
    pub a_f1: Option<T>,
    /// Matching items: fraction answered correctly.
    pub accuracy: Option<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub deep: usize,
    pub multi: usize,
    pub matching: usize,
    pub fallbacks: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub pipeline: PipelineKind,
    pub k_or_m: usize,
    pub per_item: Vec<ItemScore<T>>,
    pub aggregates: Aggregates<T>,
    /// Binary F1 of the matching answers with "Yes" as the positive class.
    /// A corpus-level statistic, not a per-item mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_f1: Option<T>,
    pub counts: Counts,
}

fn binary_f1<T: Scalar>(pairs: &[(bool, bool)]) -> T {
    let tp = pairs.iter().filter(|(l, p)| *l && *p).count();
    let fp = pairs.iter().filter(|(l, p)| !*l && *p).count();
    let fn_ = pairs.iter().filter(|(l, p)| *l && !*p).count();
    if tp == 0 {
        return T::zero();
    }
    T::from_count(2 * tp) / T::from_count(2 * tp + fp + fn_)
}

/// Scores one run (all records share pipeline and k_or_m).
pub fn aggregate<T: Scalar>(records: &[RunRecord], bench: &[BenchmarkItem]) -> Result<MetricReport<T>, EvalError> {
    let first = records.first().ok_or(EvalError::NoRecords)?;
    let items: HashMap<&str, &BenchmarkItem> = bench.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut per_item = Vec::with_capacity(records.len());
    let mut counts = Counts::default();
    let mut decisions = Vec::new();
    for record in records {
        if record.pipeline != first.pipeline || record.k_or_m != first.k_or_m {
            return Err(EvalError::MixedRuns(format!(
                "{} {} and {} {}",
                first.pipeline, first.k_or_m, record.pipeline, record.k_or_m
            )));
        }
        let item = items
            .get(record.item_id.as_str())
            .ok_or_else(|| EvalError::UnknownItem(record.item_id.clone()))?;
        let (em, f1_score) = match item.kind {
            ItemKind::Matching => {
                counts.matching += 1;
                let correct = matching_correct(item, &record.parsed_answer).unwrap_or(false);
                if let Some(pair) = &item.pair {
                    decisions.push((pair.label, record.parsed_answer.eq_ignore_ascii_case("yes")));
                }
                let score = if correct { T::one() } else { T::zero() };
                (score, score)
            }
            kind => {
                if kind == ItemKind::Deep {
                    counts.deep += 1;
                } else {
                    counts.multi += 1;
                }
                (
                    exact_match::<T>(&item.golds, &record.parsed_answer),
                    f1::<T>(&item.golds, &record.parsed_answer),
                )
            }
        };
        counts.fallbacks += usize::from(record.fallback);
        counts.failures += usize::from(record.error.is_some());
        per_item.push(ItemScore {
            item_id: record.item_id.clone(),
            kind: item.kind,
            em,
            f1: f1_score,
            fallback: record.fallback,
            failed: record.error.is_some(),
        });
    }
    let column = |kind: ItemKind, pick: fn(&ItemScore<T>) -> T| -> Option<T> {
        let values: Vec<T> = per_item.iter().filter(|s| s.kind == kind).map(pick).collect();
        mean(&values)
    };
    let aggregates = Aggregates {
        em: column(ItemKind::Deep, |s| s.em),
        f1: column(ItemKind::Deep, |s| s.f1),
        a_em: column(ItemKind::Multi, |s| s.em),
        a_f1: column(ItemKind::Multi, |s| s.f1),
        accuracy: column(ItemKind::Matching, |s| s.em),
    };
    Ok(MetricReport {
        pipeline: first.pipeline,
        k_or_m: first.k_or_m,
        aggregates,
        matching_f1: (!decisions.is_empty()).then(|| binary_f1(&decisions)),
        per_item,
        counts,
    })
}

/// Splits records into runs by (pipeline, k_or_m) and scores each.
pub fn aggregate_runs<T: Scalar>(records: &[RunRecord], bench: &[BenchmarkItem]) -> Result<Vec<MetricReport<T>>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut runs: BTreeMap<(PipelineKind, usize), Vec<RunRecord>> = BTreeMap::new();
    for record in records {
        runs.entry((record.pipeline, record.k_or_m)).or_default().push(record.clone());
    }
    runs.values().map(|run| aggregate(run, bench)).collect()
}

//! Construction of the three evaluation benchmarks.
//!
//! * deep: a subject–relation pair with a single object, where the subject
//!   and the object each occur exactly once in the source abstract;
//! * multi: a subject–relation pair whose objects come from two or more
//!   documents;
//! * matching: labelled document pairs for citation recommendation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusHandle, MatchingItem};
use crate::gateway::{ChatMessage, Gateway};
use crate::io::{self, IoError};
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::text::{contains_folded, count_occurrences};
use crate::triples::TripleIndex;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("item {id}: {message}")]
    Invalid { id: String, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}:{line}: {message}")]
    Review {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Deep,
    Multi,
    Matching,
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Deep => "deep",
            ItemKind::Multi => "multi",
            ItemKind::Matching => "matching",
        }
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceTriple {
    #[serde(rename = "s")]
    pub subject: String,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(rename = "o")]
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub kind: ItemKind,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub golds: Vec<String>,
    #[serde(default)]
    pub source_docs: Vec<String>,
    #[serde(default)]
    pub source_triples: Vec<SourceTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<MatchingItem>,
}

impl BenchmarkItem {
    /// Checks the per-kind shape rules.
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |message: &str| {
            Err(BenchError::Invalid {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.id.is_empty() {
            return invalid("empty id");
        }
        let distinct_docs: BTreeSet<&String> = self.source_docs.iter().collect();
        match self.kind {
            ItemKind::Deep => {
                if self.golds.len() != 1 || self.source_docs.len() != 1 {
                    return invalid("deep items need exactly one gold and one source document");
                }
            }
            ItemKind::Multi => {
                let distinct_golds: BTreeSet<&String> = self.golds.iter().collect();
                if distinct_golds.len() < 2 || distinct_docs.len() < 2 {
                    return invalid("multi items need two or more golds from two or more documents");
                }
            }
            ItemKind::Matching => {
                if self.pair.is_none() || !self.golds.is_empty() {
                    return invalid("matching items need a pair and no golds");
                }
            }
        }
        Ok(())
    }

    /// Subject and relation of the first source triple, joined by a space.
    pub fn gold_insight(&self) -> Option<String> {
        self.source_triples
            .first()
            .map(|t| format!("{} {}", t.subject, t.relation))
    }
}

/// Subject–relation pairs with one object whose subject and object each
/// occur exactly once in the source abstract.
pub fn filter_deep_insight(index: &TripleIndex, corpus: &CorpusHandle) -> Vec<BenchmarkItem> {
    let mut items = Vec::new();
    for (subject, relation, entries) in index.iter() {
        let [entry] = entries else { continue };
        let Some(doc) = corpus.get(&entry.doc_id) else {
            continue;
        };
        if count_occurrences(&doc.abstract_text, subject) != 1
            || count_occurrences(&doc.abstract_text, &entry.object) != 1
        {
            continue;
        }
        items.push(BenchmarkItem {
            id: format!("deep-{:05}", items.len() + 1),
            kind: ItemKind::Deep,
            question: String::new(),
            golds: vec![entry.object.clone()],
            source_docs: vec![entry.doc_id.clone()],
            source_triples: vec![SourceTriple {
                subject: subject.to_string(),
                relation: relation.to_string(),
                object: entry.object.clone(),
            }],
            pair: None,
        });
    }
    items
}

/// Subject–relation pairs with two or more distinct objects drawn from two
/// or more distinct documents.
pub fn filter_multi_source(index: &TripleIndex) -> Vec<BenchmarkItem> {
    let mut items = Vec::new();
    for (subject, relation, entries) in index.iter() {
        let mut golds = Vec::new();
        let mut docs = Vec::new();
        let mut triples = Vec::new();
        for entry in entries {
            if !golds.contains(&entry.object) {
                golds.push(entry.object.clone());
                triples.push(SourceTriple {
                    subject: subject.to_string(),
                    relation: relation.to_string(),
                    object: entry.object.clone(),
                });
            }
            if !docs.contains(&entry.doc_id) {
                docs.push(entry.doc_id.clone());
            }
        }
        if golds.len() < 2 || docs.len() < 2 {
            continue;
        }
        items.push(BenchmarkItem {
            id: format!("multi-{:05}", items.len() + 1),
            kind: ItemKind::Multi,
            question: String::new(),
            golds,
            source_docs: docs,
            source_triples: triples,
            pair: None,
        });
    }
    items
}

/// Why question generation gave up on an item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DropReason {
    /// The question still contained a gold answer after one regeneration.
    Leak,
    /// The model could not be reached.
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuestionOutcome {
    Generated(BenchmarkItem),
    Dropped { id: String, reason: DropReason },
}

fn leaks(question: &str, golds: &[String]) -> bool {
    question.trim().is_empty() || golds.iter().any(|g| contains_folded(question, g))
}

fn first_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches('"')
        .to_string()
}

/// Asks `qgen` for a question about the item's object(s).
///
/// A question that contains a gold answer is regenerated once; if it leaks
/// again the item is dropped.
pub fn generate_question(item: &BenchmarkItem, qgen: &Gateway, prompts: &PromptSet) -> Result<QuestionOutcome, BenchError> {
    let triple = item.source_triples.first().ok_or_else(|| BenchError::Invalid {
        id: item.id.clone(),
        message: "no source triple to ask about".into(),
    })?;
    let form = match item.kind {
        ItemKind::Multi => "several answers (ask in the plural)",
        _ => "a single answer",
    };
    let prompt = prompts.render(PromptKind::QuestionGen, &[&triple.subject, &triple.relation, form])?;
    let mut messages = vec![ChatMessage::user(prompt)];
    for attempt in 0..2 {
        let reply = match qgen.chat(&messages) {
            Ok(reply) => reply,
            Err(err) => {
                return Ok(QuestionOutcome::Dropped {
                    id: item.id.clone(),
                    reason: DropReason::Transport(err.to_string()),
                })
            }
        };
        let question = first_line(&reply.text);
        if !leaks(&question, &item.golds) {
            let mut item = item.clone();
            item.question = question;
            return Ok(QuestionOutcome::Generated(item));
        }
        if attempt == 0 {
            messages.push(ChatMessage::assistant(reply.text));
            messages.push(ChatMessage::user(
                "The question must not contain the answer. Rewrite it without revealing the answer. Return only the question.",
            ));
        }
    }
    Ok(QuestionOutcome::Dropped {
        id: item.id.clone(),
        reason: DropReason::Leak,
    })
}

pub fn build_matching_bench(pairs: &[MatchingItem]) -> Vec<BenchmarkItem> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| BenchmarkItem {
            id: format!("match-{:05}", i + 1),
            kind: ItemKind::Matching,
            question: String::new(),
            golds: Vec::new(),
            source_docs: vec![pair.doc_a.clone(), pair.doc_b.clone()],
            source_triples: Vec::new(),
            pair: Some(pair.clone()),
        })
        .collect()
}

/// Per-kind item counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub deep: usize,
    pub multi: usize,
    pub matching: usize,
}

pub fn dataset_stats(items: &[BenchmarkItem]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for item in items {
        match item.kind {
            ItemKind::Deep => stats.deep += 1,
            ItemKind::Multi => stats.multi += 1,
            ItemKind::Matching => stats.matching += 1,
        }
    }
    stats
}

/// Validates and writes items, one JSON record per line.
pub fn emit_benchmark(items: &[BenchmarkItem], path: &Path) -> Result<usize, BenchError> {
    let mut ids = HashSet::new();
    for item in items {
        item.validate()?;
        if !ids.insert(item.id.as_str()) {
            return Err(BenchError::Invalid {
                id: item.id.clone(),
                message: "duplicate item id".into(),
            });
        }
    }
    Ok(io::write_jsonl(path, items)?)
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, BenchError> {
    let items: Vec<BenchmarkItem> = io::read_jsonl(path)?;
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

/// Header of the human review sheet.
pub const REVIEW_HEADER: &str = "id\tkind\tquestion\tgolds\tsource_docs\tdecision";

fn tsv_field(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

/// One row per item with an empty decision column for a reviewer to fill
/// with `accept` or `reject`.
pub fn review_sheet(items: &[BenchmarkItem]) -> String {
    let mut out = String::from(REVIEW_HEADER);
    out.push('\n');
    for item in items {
        let row = [
            tsv_field(&item.id),
            item.kind.to_string(),
            tsv_field(&item.question),
            tsv_field(&item.golds.join(" | ")),
            tsv_field(&item.source_docs.join(" | ")),
            String::new(),
        ];
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

/// Reads reviewer decisions: item id to accept (`true`) or reject (`false`).
/// Rows with an empty decision are left out.
pub fn parse_review(text: &str, origin: &str) -> Result<BTreeMap<String, bool>, BenchError> {
    let mut decisions = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(BenchError::Review {
                path: origin.to_string(),
                line: idx + 1,
                message: format!("expected 6 columns, found {}", fields.len()),
            });
        }
        let decision = match fields[5].trim().to_lowercase().as_str() {
            "" => continue,
            "accept" | "a" | "yes" | "keep" => true,
            "reject" | "r" | "no" | "drop" => false,
            other => {
                return Err(BenchError::Review {
                    path: origin.to_string(),
                    line: idx + 1,
                    message: format!("unknown decision {other:?}"),
                })
            }
        };
        decisions.insert(fields[0].to_string(), decision);
    }
    Ok(decisions)
}

/// Drops items a reviewer rejected; undecided items are kept.
pub fn apply_review(items: Vec<BenchmarkItem>, decisions: &BTreeMap<String, bool>) -> Vec<BenchmarkItem> {
    items
        .into_iter()
        .filter(|item| decisions.get(&item.id).copied().unwrap_or(true))
        .collect()
}

//! Abstract corpora, matching labels and graph-based sampling.
//!
//! A corpus file holds one JSON record per line:
//! `{"id": str, "title": str, "abstract": str, "neighbors": [str]}`.
//! Neighbor links are treated as undirected edges; links to ids that are not
//! in the file are dropped at ingest and counted.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::text::token_count;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("unknown document id {0}")]
    UnknownId(String),
    #[error("bfs_sample needs at least one seed")]
    NoSeeds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub neighbors: BTreeSet<String>,
    /// Whitespace tokens of the abstract, computed at ingest.
    #[serde(skip)]
    pub token_count: usize,
}

#[derive(Debug, Deserialize)]
struct DocumentRecord {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    #[serde(default)]
    neighbors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingItem {
    pub doc_a: String,
    pub doc_b: String,
    pub label: bool,
}

#[derive(Debug, Deserialize)]
struct MatchingRecord {
    doc_a: String,
    doc_b: String,
    label: Option<bool>,
}

/// Matching pairs plus the number of records that referenced unknown ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingLoad {
    pub items: Vec<MatchingItem>,
    pub dropped: usize,
}

/// An immutable, id-indexed corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusHandle {
    documents: BTreeMap<String, Document>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    edge_count: usize,
    dropped_edges: usize,
    source_path: String,
}

impl CorpusHandle {
    /// Builds a corpus from in-memory documents, applying the ingest rules.
    pub fn from_documents(
        docs: impl IntoIterator<Item = Document>,
        source_path: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut documents = BTreeMap::new();
        for (idx, mut doc) in docs.into_iter().enumerate() {
            validate(&doc, idx + 1)?;
            if documents.contains_key(&doc.id) {
                return Err(CorpusError::DuplicateId(doc.id));
            }
            doc.token_count = token_count(&doc.abstract_text);
            documents.insert(doc.id.clone(), doc);
        }
        Ok(Self::link(documents, source_path.into()))
    }

    fn link(mut documents: BTreeMap<String, Document>, source_path: String) -> Self {
        let ids: HashSet<String> = documents.keys().cloned().collect();
        let mut dropped_edges = 0;
        let mut adjacency: BTreeMap<String, BTreeSet<String>> =
            ids.iter().map(|id| (id.clone(), BTreeSet::new())).collect();
        for doc in documents.values_mut() {
            let before = doc.neighbors.len();
            doc.neighbors
                .retain(|n| n != &doc.id && ids.contains(n.as_str()));
            dropped_edges += before - doc.neighbors.len();
            for n in &doc.neighbors {
                adjacency.get_mut(&doc.id).unwrap().insert(n.clone());
                adjacency.get_mut(n).unwrap().insert(doc.id.clone());
            }
        }
        if dropped_edges > 0 {
            log::warn!("{source_path}: dropped {dropped_edges} dangling neighbor link(s)");
        }
        let edge_count = adjacency.values().map(BTreeSet::len).sum::<usize>() / 2;
        Self {
            documents,
            adjacency,
            edge_count,
            dropped_edges,
            source_path,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.documents.contains_key(id)
    }

    /// Documents in ascending id order.
    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.documents.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn dropped_edges(&self) -> usize {
        self.dropped_edges
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    /// Undirected neighbors of `id`, ascending.
    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &str> {
        self.adjacency
            .get(id)
            .into_iter()
            .flat_map(|set| set.iter().map(String::as_str))
    }

    pub fn mean_token_count(&self) -> f64 {
        if self.documents.is_empty() {
            return 0.0;
        }
        let total: usize = self.documents.values().map(|d| d.token_count).sum();
        total as f64 / self.documents.len() as f64
    }

    /// Adds the positive matching pairs as undirected edges.
    pub fn with_matching_edges(&self, pairs: &[MatchingItem]) -> Self {
        let mut documents = self.documents.clone();
        for pair in pairs.iter().filter(|p| p.label) {
            if let Some(doc) = documents.get_mut(&pair.doc_a) {
                doc.neighbors.insert(pair.doc_b.clone());
            }
        }
        Self::link(documents, self.source_path.clone())
    }

    /// The sub-corpus restricted to `ids`; edges leaving the subset are cut.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self, CorpusError> {
        let keep: HashSet<&str> = ids.into_iter().collect();
        let mut documents = BTreeMap::new();
        for id in &keep {
            let doc = self
                .documents
                .get(*id)
                .ok_or_else(|| CorpusError::UnknownId(id.to_string()))?;
            let mut doc = doc.clone();
            doc.neighbors.retain(|n| keep.contains(n.as_str()));
            documents.insert(doc.id.clone(), doc);
        }
        Ok(Self::link(documents, self.source_path.clone()))
    }

    /// Writes the corpus in its ingest format, ascending by id.
    pub fn write(&self, path: &Path) -> Result<usize, CorpusError> {
        let docs: Vec<&Document> = self.documents.values().collect();
        Ok(io::write_jsonl(path, &docs)?)
    }
}

fn validate(doc: &Document, line: usize) -> Result<(), CorpusError> {
    if doc.id.trim().is_empty() {
        return Err(CorpusError::Malformed {
            line,
            message: "empty id".into(),
        });
    }
    if doc.abstract_text.trim().is_empty() {
        return Err(CorpusError::Malformed {
            line,
            message: format!("empty abstract for {}", doc.id),
        });
    }
    Ok(())
}

/// Loads a line-delimited corpus file.
pub fn ingest_corpus(path: &Path) -> Result<CorpusHandle, CorpusError> {
    let mut documents: BTreeMap<String, Document> = BTreeMap::new();
    for (line, text) in io::read_lines(path)? {
        let record: DocumentRecord =
            serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let doc = Document {
            token_count: token_count(&record.abstract_text),
            id: record.id,
            title: record.title,
            abstract_text: record.abstract_text,
            neighbors: record.neighbors.into_iter().collect(),
        };
        validate(&doc, line)?;
        if documents.contains_key(&doc.id) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        documents.insert(doc.id.clone(), doc);
    }
    Ok(CorpusHandle::link(documents, path.display().to_string()))
}

/// Breadth-first sample of `n` documents.
///
/// Seeds are enqueued in the given order, neighbors are expanded in ascending
/// id order, and when the frontier runs dry the smallest unvisited id starts
/// a new traversal. Output is in visitation order.
pub fn bfs_sample(
    corpus: &CorpusHandle,
    seeds: &[String],
    n: usize,
) -> Result<Vec<String>, CorpusError> {
    if seeds.is_empty() {
        return Err(CorpusError::NoSeeds);
    }
    if let Some(bad) = seeds.iter().find(|s| !corpus.contains(s)) {
        return Err(CorpusError::UnknownId(bad.clone()));
    }
    let target = n.min(corpus.len());
    let mut out = Vec::with_capacity(target);
    let mut seen: HashSet<&str> = HashSet::new();
    let mut queue: VecDeque<&str> = VecDeque::new();
    for seed in seeds {
        if seen.insert(seed.as_str()) {
            queue.push_back(seed.as_str());
        }
    }
    let mut restart = corpus.ids();
    while out.len() < target {
        let Some(current) = queue.pop_front() else {
            let next = restart
                .by_ref()
                .find(|id| !seen.contains(id))
                .expect("unvisited id exists while below corpus size");
            seen.insert(next);
            queue.push_back(next);
            continue;
        };
        out.push(current.to_string());
        for neighbor in corpus.neighbors(current) {
            if seen.insert(neighbor) {
                queue.push_back(neighbor);
            }
        }
    }
    Ok(out)
}

/// Loads matching labels; pairs naming unknown documents are dropped.
pub fn load_matching_pairs(path: &Path, corpus: &CorpusHandle) -> Result<MatchingLoad, CorpusError> {
    let mut items = Vec::new();
    let mut dropped = 0;
    for (line, text) in io::read_lines(path)? {
        let record: MatchingRecord =
            serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let label = record.label.ok_or_else(|| CorpusError::Malformed {
            line,
            message: "missing label field".into(),
        })?;
        if record.doc_a == record.doc_b
            || !corpus.contains(&record.doc_a)
            || !corpus.contains(&record.doc_b)
        {
            dropped += 1;
            continue;
        }
        items.push(MatchingItem {
            doc_a: record.doc_a,
            doc_b: record.doc_b,
            label,
        });
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} unresolvable matching pair(s)", path.display());
    }
    Ok(MatchingLoad { items, dropped })
}

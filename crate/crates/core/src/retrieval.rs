//! Dense-retrieval baseline: embeddings, an exact cosine index over documents
//! or linearized triples, and retrieval-quality metrics.
//!
//! Vectors are stored unit-normalized, so cosine similarity is a dot product.
//! Search is an exhaustive scan; ties are broken by ascending key.

pub mod embed;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::benchbuild::{BenchmarkItem, ItemKind};
use crate::io::{digest_parts, write_atomic, IoError};
use crate::scalar::{mean, Scalar};

pub use embed::{embed, Embedder, EmbedOptions, HashingEmbedder, HttpEmbedder, OneHotEmbedder};

const MAGIC: &[u8; 4] = b"IRVX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("embedding request failed: {0}")]
    Embedder(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cannot normalize a zero vector (text #{0})")]
    ZeroVector(usize),
    #[error("duplicate index key {0}")]
    DuplicateKey(String),
    #[error("index file {path}: {message}")]
    Format { path: String, message: String },
    #[error("expected a {expected} index, found {found}")]
    Granularity { expected: Granularity, found: Granularity },
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Document,
    Triple,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Document => "document",
            Granularity::Triple => "triple",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "document" => Ok(Granularity::Document),
            "triple" => Ok(Granularity::Triple),
            other => Err(format!("unknown granularity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<T> {
    pub key: String,
    pub vector: Vec<T>,
    pub payload: String,
}

/// An exact cosine-similarity index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T: Scalar> {
    granularity: Granularity,
    dim: usize,
    embedder_id: String,
    digest: String,
    entries: Vec<IndexEntry<T>>,
}

/// A ranked list of `(key, score)`, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult<T> {
    pub query: String,
    pub ranked: Vec<(String, T)>,
}

impl<T: Scalar> RetrievalResult<T> {
    /// 1-based rank of `key`, if retrieved.
    pub fn rank_of(&self, key: &str) -> Option<usize> {
        self.ranked.iter().position(|(k, _)| k == key).map(|p| p + 1)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(k, _)| k.as_str())
    }
}

/// Digest identifying the inputs an index was built from.
pub fn content_digest(embedder_id: &str, granularity: Granularity, items: &[(String, String)]) -> String {
    let granularity = granularity.to_string();
    let mut parts: Vec<&[u8]> = vec![embedder_id.as_bytes(), granularity.as_bytes()];
    for (key, text) in items {
        parts.push(key.as_bytes());
        parts.push(text.as_bytes());
    }
    digest_parts(parts)
}

/// Min-heap wrapper: the worst retained candidate sits on top.
struct Candidate<'a, T> {
    score: T,
    key: &'a str,
    slot: usize,
}

impl<T: Scalar> Candidate<'_, T> {
    /// `Less` means ranked earlier (higher score, then smaller key).
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.key.cmp(other.key))
    }
}

impl<T: Scalar> PartialEq for Candidate<'_, T> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Candidate<'_, T> {}
impl<T: Scalar> PartialOrd for Candidate<'_, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Candidate<'_, T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Scalar> VectorIndex<T> {
    /// Assembles an index from already-normalized vectors.
    pub fn from_entries(
        granularity: Granularity,
        embedder_id: impl Into<String>,
        digest: impl Into<String>,
        entries: Vec<IndexEntry<T>>,
    ) -> Result<Self, RetrievalError> {
        let dim = entries.first().map_or(0, |e| e.vector.len());
        let mut keys = HashSet::new();
        for entry in &entries {
            if entry.vector.len() != dim {
                return Err(RetrievalError::Dimension {
                    expected: dim,
                    got: entry.vector.len(),
                });
            }
            if !keys.insert(entry.key.as_str()) {
                return Err(RetrievalError::DuplicateKey(entry.key.clone()));
            }
        }
        Ok(Self {
            granularity,
            dim,
            embedder_id: embedder_id.into(),
            digest: digest.into(),
            entries,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn payload(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| e.payload.as_str())
    }

    /// Exact top-`k` by cosine similarity against a unit query vector.
    /// `k` larger than the index returns every entry.
    pub fn search(&self, query: &[T], k: usize) -> Vec<(String, T)> {
        self.search_filtered(query, k, |_| true)
    }

    /// Like [`search`](Self::search) but only over keys accepted by `keep`.
    pub fn search_filtered(&self, query: &[T], k: usize, keep: impl Fn(&str) -> bool) -> Vec<(String, T)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate<'_, T>> = BinaryHeap::with_capacity(k + 1);
        for (slot, entry) in self.entries.iter().enumerate() {
            if !keep(&entry.key) {
                continue;
            }
            let candidate = Candidate {
                score: dot(query, &entry.vector),
                key: &entry.key,
                slot,
            };
            if heap.len() < k {
                heap.push(candidate);
            } else if candidate < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(candidate);
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| (self.entries[c.slot].key.clone(), c.score))
            .collect()
    }

    /// Path of the plain-text manifest written beside `path`.
    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest");
        path.with_file_name(name)
    }

    fn manifest(&self) -> String {
        format!(
            "embedder={}\ndim={}\ngranularity={}\nscalar={}\ncount={}\ndigest={}\n",
            self.embedder_id,
            self.dim,
            self.granularity,
            T::TAG,
            self.entries.len(),
            self.digest
        )
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut buf, T::TAG);
        put_str(&mut buf, &self.granularity.to_string());
        put_str(&mut buf, &self.embedder_id);
        put_str(&mut buf, &self.digest);
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for entry in &self.entries {
            put_str(&mut buf, &entry.key);
            put_str(&mut buf, &entry.payload);
            for &v in &entry.vector {
                v.write_le(&mut buf);
            }
        }
        buf
    }

    /// Writes the binary index and its manifest atomically.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        write_atomic(path, &self.encode())?;
        write_atomic(&Self::manifest_path(path), self.manifest().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        let format_err = |message: String| RetrievalError::Format {
            path: path.display().to_string(),
            message,
        };
        let mut reader = Reader { bytes: &bytes, pos: 0 };
        if reader.take(4).map_err(&format_err)? != MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let version = reader.u32().map_err(&format_err)?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let tag = reader.string().map_err(&format_err)?;
        if tag != T::TAG {
            return Err(format_err(format!("stored as {tag}, requested {}", T::TAG)));
        }
        let granularity: Granularity = reader.string().map_err(&format_err)?.parse().map_err(&format_err)?;
        let embedder_id = reader.string().map_err(&format_err)?;
        let digest = reader.string().map_err(&format_err)?;
        let dim = reader.u64().map_err(&format_err)? as usize;
        let count = reader.u64().map_err(&format_err)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let key = reader.string().map_err(&format_err)?;
            let payload = reader.string().map_err(&format_err)?;
            let raw = reader.take(dim * T::WIDTH).map_err(&format_err)?;
            let vector = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
            entries.push(IndexEntry { key, vector, payload });
        }
        if reader.pos != bytes.len() {
            return Err(format_err("trailing bytes".into()));
        }
        let index = Self {
            granularity,
            dim,
            embedder_id,
            digest,
            entries,
        };
        let manifest_path = Self::manifest_path(path);
        if let Ok(manifest) = std::fs::read_to_string(&manifest_path) {
            if manifest != index.manifest() {
                return Err(format_err("manifest does not match index contents".into()));
            }
        }
        Ok(index)
    }

    /// Reads only the digest recorded in the manifest beside `path`.
    pub fn stored_digest(path: &Path) -> Option<String> {
        let manifest = std::fs::read_to_string(Self::manifest_path(path)).ok()?;
        manifest
            .lines()
            .find_map(|l| l.strip_prefix("digest="))
            .map(str::to_string)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| e.to_string())
    }
}

/// Embeds `(key, text)` items into an index. Keys must be unique.
pub fn build_index<T: Scalar>(
    items: &[(String, String)],
    granularity: Granularity,
    embedder: &dyn Embedder,
    options: &EmbedOptions,
) -> Result<VectorIndex<T>, RetrievalError> {
    let mut keys = HashSet::new();
    for (key, _) in items {
        if !keys.insert(key.as_str()) {
            return Err(RetrievalError::DuplicateKey(key.clone()));
        }
    }
    let texts: Vec<String> = items.iter().map(|(_, t)| t.clone()).collect();
    let vectors = embed::<T>(&texts, embedder, options)?;
    let entries = items
        .iter()
        .zip(vectors)
        .map(|((key, text), vector)| IndexEntry {
            key: key.clone(),
            vector,
            payload: text.clone(),
        })
        .collect();
    let digest = content_digest(&embedder.id(), granularity, items);
    VectorIndex::from_entries(granularity, embedder.id(), digest, entries)
}

/// Loads the index at `path` when its manifest digest matches the inputs,
/// otherwise builds and saves it. The flag reports whether it was reused.
pub fn build_or_load<T: Scalar>(
    path: &Path,
    items: &[(String, String)],
    granularity: Granularity,
    embedder: &dyn Embedder,
    options: &EmbedOptions,
) -> Result<(VectorIndex<T>, bool), RetrievalError> {
    let digest = content_digest(&embedder.id(), granularity, items);
    if path.exists() && VectorIndex::<T>::stored_digest(path).as_deref() == Some(digest.as_str()) {
        return Ok((VectorIndex::load(path)?, true));
    }
    let index = build_index(items, granularity, embedder, options)?;
    index.save(path)?;
    Ok((index, false))
}

/// Embeds `query` and returns the exact top-`k` entries.
pub fn top_k<T: Scalar>(
    index: &VectorIndex<T>,
    query: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<RetrievalResult<T>, RetrievalError> {
    let vector = embed::<T>(&[query.to_string()], embedder, &EmbedOptions::default())?
        .pop()
        .expect("one vector per text");
    if vector.len() != index.dim() && !index.is_empty() {
        return Err(RetrievalError::Dimension {
            expected: index.dim(),
            got: vector.len(),
        });
    }
    Ok(RetrievalResult {
        query: query.to_string(),
        ranked: index.search(&vector, k.max(1)),
    })
}

/// Hits@K for each cutoff in `ks` and reciprocal rank for one item, averaged
/// over its gold documents. Ranks beyond `k_max` (or missing) count as misses
/// with reciprocal rank zero.
pub fn score_ranks<T: Scalar>(ranks: &[Option<usize>], ks: &[usize], k_max: usize) -> (Vec<T>, T) {
    if ranks.is_empty() {
        return (vec![T::zero(); ks.len()], T::zero());
    }
    let n = T::from_count(ranks.len());
    let within = |r: &Option<usize>, k: usize| matches!(r, Some(rank) if *rank <= k.min(k_max));
    let hits = ks
        .iter()
        .map(|&k| T::from_count(ranks.iter().filter(|r| within(r, k)).count()) / n)
        .collect();
    let rr = ranks
        .iter()
        .map(|r| match r {
            Some(rank) if *rank <= k_max => T::one() / T::from_count(*rank),
            _ => T::zero(),
        })
        .fold(T::zero(), |a, b| a + b)
        / n;
    (hits, rr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRetrieval<T> {
    pub item_id: String,
    pub kind: ItemKind,
    /// Rank of each gold source document, in `source_docs` order.
    pub ranks: Vec<Option<usize>>,
    pub hits: Vec<T>,
    pub mrr: T,
}

/// Averages for one item kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAggregate<T> {
    pub count: usize,
    /// Hits@K keyed by K.
    pub hits: BTreeMap<usize, T>,
    pub mrr: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport<T> {
    pub ks: Vec<usize>,
    pub k_max: usize,
    pub items: Vec<ItemRetrieval<T>>,
    /// Hits@K and MRR over deep items.
    pub deep: Option<RetrievalAggregate<T>>,
    /// Averaged Hits@K and MRR over multi-source items.
    pub multi: Option<RetrievalAggregate<T>>,
}

/// Aggregates per-item scores into a report.
pub fn summarize<T: Scalar>(items: Vec<ItemRetrieval<T>>, ks: &[usize], k_max: usize) -> RetrievalReport<T> {
    let aggregate = |kind: ItemKind| -> Option<RetrievalAggregate<T>> {
        let chosen: Vec<&ItemRetrieval<T>> = items.iter().filter(|i| i.kind == kind).collect();
        if chosen.is_empty() {
            return None;
        }
        let hits = ks
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let column: Vec<T> = chosen.iter().map(|i| i.hits[j]).collect();
                (k, mean(&column).unwrap())
            })
            .collect();
        let mrrs: Vec<T> = chosen.iter().map(|i| i.mrr).collect();
        Some(RetrievalAggregate {
            count: chosen.len(),
            hits,
            mrr: mean(&mrrs).unwrap(),
        })
    };
    RetrievalReport {
        ks: ks.to_vec(),
        k_max,
        deep: aggregate(ItemKind::Deep),
        multi: aggregate(ItemKind::Multi),
        items,
    }
}

/// Retrieves with each question and scores where its source documents land.
pub fn eval_retriever<T: Scalar>(
    bench: &[BenchmarkItem],
    index: &VectorIndex<T>,
    embedder: &dyn Embedder,
    ks: &[usize],
    k_max: usize,
) -> Result<RetrievalReport<T>, RetrievalError> {
    if index.granularity() != Granularity::Document {
        return Err(RetrievalError::Granularity {
            expected: Granularity::Document,
            found: index.granularity(),
        });
    }
    let mut items = Vec::new();
    for item in bench.iter().filter(|i| i.kind != ItemKind::Matching) {
        let result = top_k(index, &item.question, k_max, embedder)?;
        let ranks: Vec<Option<usize>> = item.source_docs.iter().map(|d| result.rank_of(d)).collect();
        let (hits, mrr) = score_ranks::<T>(&ranks, ks, k_max);
        items.push(ItemRetrieval {
            item_id: item.id.clone(),
            kind: item.kind,
            ranks,
            hits,
            mrr,
        });
    }
    Ok(summarize(items, ks, k_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_world() -> (OneHotEmbedder, VectorIndex<f32>) {
        let texts = ["alpha", "beta", "gamma"];
        let embedder = OneHotEmbedder::new(texts);
        let items: Vec<(String, String)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("d{}", i + 1), t.to_string()))
            .collect();
        let index = build_index(&items, Granularity::Document, &embedder, &EmbedOptions::default()).unwrap();
        (embedder, index)
    }

    #[test]
    fn one_hot_index_shape() {
        let (_, index) = one_hot_world();
        assert_eq!(index.dim(), 3);
        assert_eq!(index.len(), 3);
    }

    #[test]
    fn query_equal_to_entry_ranks_first() {
        let (embedder, index) = one_hot_world();
        let result = top_k(&index, "beta", 1, &embedder).unwrap();
        assert_eq!(result.ranked, vec![("d2".to_string(), 1.0)]);
        assert_eq!(top_k(&index, "beta", 10, &embedder).unwrap().ranked.len(), 3);
    }

    #[test]
    fn ties_break_by_ascending_key() {
        let v = vec![1.0f64, 0.0];
        let entries = ["z", "b", "m"]
            .iter()
            .map(|k| IndexEntry {
                key: k.to_string(),
                vector: v.clone(),
                payload: String::new(),
            })
            .collect();
        let index = VectorIndex::from_entries(Granularity::Document, "x", "d", entries).unwrap();
        let keys: Vec<String> = index.search(&v, 3).into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["b", "m", "z"]);
        let keys: Vec<String> = index.search(&v, 2).into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["b", "m"]);
    }

    #[test]
    fn duplicate_key_rejected() {
        let embedder = OneHotEmbedder::new(["a"]);
        let items = vec![("d1".to_string(), "a".to_string()), ("d1".to_string(), "a".to_string())];
        assert!(matches!(
            build_index::<f32>(&items, Granularity::Document, &embedder, &EmbedOptions::default()),
            Err(RetrievalError::DuplicateKey(_))
        ));
    }

    #[test]
    fn triple_granularity_keeps_payload() {
        let embedder = HashingEmbedder::new(16);
        let items = vec![("t1".to_string(), "a uses b".to_string())];
        let index: VectorIndex<f32> = build_index(&items, Granularity::Triple, &embedder, &EmbedOptions::default()).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.payload("t1"), Some("a uses b"));
        assert_eq!(index.granularity(), Granularity::Triple);
    }

    #[test]
    fn persistence_round_trip_and_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.idx");
        let embedder = HashingEmbedder::new(8);
        let items = vec![
            ("d1".to_string(), "graph neural networks".to_string()),
            ("d2".to_string(), "machine translation".to_string()),
        ];
        let (built, reused) = build_or_load::<f64>(&path, &items, Granularity::Document, &embedder, &EmbedOptions::default()).unwrap();
        assert!(!reused);
        let loaded = VectorIndex::<f64>::load(&path).unwrap();
        assert_eq!(loaded, built);
        let (again, reused) = build_or_load::<f64>(&path, &items, Granularity::Document, &embedder, &EmbedOptions::default()).unwrap();
        assert!(reused);
        assert_eq!(again, built);
        assert!(VectorIndex::<f32>::load(&path).is_err());
        let manifest = std::fs::read_to_string(VectorIndex::<f64>::manifest_path(&path)).unwrap();
        assert!(manifest.contains("dim=8\n") && manifest.contains("granularity=document\n"));
    }

    #[test]
    fn mrr_and_hits_for_single_doc() {
        let (hits, mrr) = score_ranks::<f64>(&[Some(1)], &[50], 50);
        assert_eq!((hits, mrr), (vec![1.0], 1.0));
        let (_, mrr) = score_ranks::<f64>(&[Some(4)], &[50], 50);
        assert_eq!(mrr, 0.25);
    }

    #[test]
    fn averaged_metrics_for_multi_item() {
        let (hits, mrr) = score_ranks::<f64>(&[Some(2), None], &[50], 50);
        assert_eq!(mrr, 0.25);
        assert_eq!(hits, vec![0.5]);
    }

    #[test]
    fn ranks_beyond_cutoff_are_misses() {
        let (hits, mrr) = score_ranks::<f64>(&[Some(60)], &[10, 100], 50);
        assert_eq!(hits, vec![0.0, 0.0]);
        assert_eq!(mrr, 0.0);
    }

    #[test]
    fn eval_requires_document_index() {
        let embedder = HashingEmbedder::new(4);
        let items = vec![("t".to_string(), "x y".to_string())];
        let index: VectorIndex<f32> = build_index(&items, Granularity::Triple, &embedder, &EmbedOptions::default()).unwrap();
        assert!(matches!(
            eval_retriever(&[], &index, &embedder, &[1], 1),
            Err(RetrievalError::Granularity { .. })
        ));
    }
}

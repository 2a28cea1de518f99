//! Text embedders and batched, normalized embedding.

use std::collections::HashMap;
use std::time::Duration;

use serde_json::json;

use super::RetrievalError;
use crate::scalar::Scalar;

/// Produces raw (not necessarily normalized) vectors for a batch of texts.
pub trait Embedder: Send + Sync {
    /// Identity recorded in index manifests.
    fn id(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub parallelism: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            parallelism: 4,
        }
    }
}

/// Embeds `texts` in batches and unit-normalizes every vector.
pub fn embed<T: Scalar>(texts: &[String], embedder: &dyn Embedder, options: &EmbedOptions) -> Result<Vec<Vec<T>>, RetrievalError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let batch_size = options.batch_size.max(1);
    let batches: Vec<&[String]> = texts.chunks(batch_size).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
    let raw: Vec<Result<Vec<Vec<f64>>, RetrievalError>> = pool.install(|| {
        use rayon::prelude::*;
        batches.par_iter().map(|batch| embedder.embed_batch(batch)).collect()
    });
    let mut out = Vec::with_capacity(texts.len());
    let mut dim = None;
    for (batch, vectors) in batches.iter().zip(raw) {
        let vectors = vectors?;
        if vectors.len() != batch.len() {
            return Err(RetrievalError::Embedder(format!(
                "asked for {} vectors, received {}",
                batch.len(),
                vectors.len()
            )));
        }
        for vector in vectors {
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected {
                return Err(RetrievalError::Dimension {
                    expected,
                    got: vector.len(),
                });
            }
            out.push(normalize::<T>(&vector).ok_or(RetrievalError::ZeroVector(out.len()))?);
        }
    }
    Ok(out)
}

/// Converts to `T` and scales to unit L2 norm; `None` for a zero vector.
pub fn normalize<T: Scalar>(raw: &[f64]) -> Option<Vec<T>> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(raw.iter().map(|v| T::lit(v / norm)).collect())
}

/// One dimension per known text; used to build worlds with exact answers.
#[derive(Debug, Clone)]
pub struct OneHotEmbedder {
    slots: HashMap<String, usize>,
    scale: f64,
}

impl OneHotEmbedder {
    pub fn new(texts: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut slots = HashMap::new();
        for text in texts {
            let next = slots.len();
            slots.entry(text.into()).or_insert(next);
        }
        Self { slots, scale: 1.0 }
    }

    /// Emits vectors of length `scale` instead of 1, to exercise normalization.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

impl Embedder for OneHotEmbedder {
    fn id(&self) -> String {
        format!("one-hot:{}", self.slots.len())
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        texts
            .iter()
            .map(|t| {
                let slot = *self
                    .slots
                    .get(t)
                    .ok_or_else(|| RetrievalError::Embedder(format!("one-hot embedder has no slot for {t:?}")))?;
                let mut v = vec![0.0; self.slots.len()];
                v[slot] = self.scale;
                Ok(v)
            })
            .collect()
    }
}

/// Deterministic bag-of-words feature hashing (FNV-1a, signed buckets).
///
/// Gives lexical-overlap retrieval without a model. A text with no word
/// characters embeds to a fixed bias vector so it can still be normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut any = false;
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = Self::fnv1a(word.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
            any = true;
        }
        if !any || v.iter().all(|x| *x == 0.0) {
            v[0] = 1e-3;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-fnv1a:{}", self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Client for an OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    retry_limit: u32,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, retry_limit: u32) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/embeddings") {
            base.to_string()
        } else {
            format!("{base}/embeddings")
        };
        Ok(Self {
            client,
            url,
            model: model.to_string(),
            api_key: std::env::var(api_key_env).ok(),
            retry_limit,
        })
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, (bool, String)> {
        let mut request = self
            .client
            .post(&self.url)
            .json(&json!({"model": self.model, "input": texts}));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| (true, e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((retry, format!("HTTP {status}: {}", response.text().unwrap_or_default())));
        }
        let value: serde_json::Value = response.json().map_err(|e| (false, e.to_string()))?;
        let data = value["data"].as_array().ok_or((false, "missing data array".to_string()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let idx = row["index"].as_u64().map_or(i, |x| x as usize);
                let vector = row["embedding"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                    .unwrap_or_default();
                (idx, vector)
            })
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}@{}", self.model, self.url)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut attempt = 0;
        loop {
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err((retry, message)) if retry && attempt < self.retry_limit => {
                    attempt += 1;
                    log::debug!("embedding attempt {attempt} failed: {message}");
                    std::thread::sleep(Duration::from_millis(250 << attempt.min(7)));
                }
                Err((_, message)) => return Err(RetrievalError::Embedder(message)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_vectors_are_unit() {
        let e = OneHotEmbedder::new(["a", "b"]);
        let v = embed::<f32>(&["b".to_string()], &e, &EmbedOptions::default()).unwrap();
        assert_eq!(v, vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let e = HashingEmbedder::new(4);
        assert!(embed::<f64>(&[], &e, &EmbedOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn norm_two_is_rescaled() {
        let e = OneHotEmbedder::new(["a"]).with_scale(2.0);
        let v = embed::<f64>(&["a".to_string()], &e, &EmbedOptions::default()).unwrap();
        let norm: f64 = v[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn batches_preserve_order() {
        let e = HashingEmbedder::new(32);
        let texts: Vec<String> = (0..25).map(|i| format!("word{i} shared")).collect();
        let options = EmbedOptions {
            batch_size: 4,
            parallelism: 3,
        };
        let batched = embed::<f64>(&texts, &e, &options).unwrap();
        let single = embed::<f64>(&texts, &e, &EmbedOptions::default()).unwrap();
        assert_eq!(batched, single);
    }

    struct Ragged;

    impl Embedder for Ragged {
        fn id(&self) -> String {
            "ragged".into()
        }

        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
            Ok(texts.iter().map(|t| vec![1.0; t.len()]).collect())
        }
    }

    #[test]
    fn dimension_mismatch_across_batches_errors() {
        let texts = vec!["ab".to_string(), "abc".to_string()];
        let options = EmbedOptions {
            batch_size: 1,
            parallelism: 1,
        };
        assert!(matches!(
            embed::<f32>(&texts, &Ragged, &options),
            Err(RetrievalError::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn hashing_is_deterministic_and_nonzero() {
        let e = HashingEmbedder::new(16);
        assert_eq!(e.vector("Graph networks"), e.vector("graph  NETWORKS"));
        assert!(e.vector("!!!").iter().any(|x| *x != 0.0));
    }
}

//! Insight-driven retrieval-augmented generation.
//!
//! The crate covers the whole offline workflow: loading abstract corpora,
//! extracting and normalizing knowledge triples, building the deep-insight,
//! multi-source and matching benchmarks, talking to chat-completions models
//! (or deterministic mocks), the dense-retrieval baseline, the four answer
//! pipelines and the evaluation metrics.
//!
//! Numeric code (embedding vectors, retrieval scores, metric values) is
//! generic over [`Scalar`]; the aliases below pin the common choices.

pub mod benchbuild;
pub mod corpus;
pub mod evalkit;
pub mod gateway;
pub mod io;
pub mod pipelines;
pub mod prompts;
pub mod retrieval;
pub mod scalar;
pub mod text;
pub mod triples;

pub use benchbuild::{BenchmarkItem, ItemKind};
pub use corpus::{CorpusHandle, Document, MatchingItem};
pub use gateway::{Gateway, ModelHandle, Role};
pub use pipelines::{InsightQuery, PipelineKind, RunRecord};
pub use scalar::Scalar;
pub use triples::{RelationRules, Triple, TripleIndex};

/// Embedding index with single-precision vectors, the default storage type.
pub type VectorIndex = retrieval::VectorIndex<f32>;
/// Embedding index with double-precision vectors.
pub type VectorIndexF64 = retrieval::VectorIndex<f64>;
/// Ranked retrieval output for [`VectorIndex`].
pub type RetrievalResult = retrieval::RetrievalResult<f32>;
/// Retrieval quality summary computed in double precision.
pub type RetrievalReport = retrieval::RetrievalReport<f64>;
/// Answer-quality report computed in double precision.
pub type MetricReport = evalkit::MetricReport<f64>;
/// Word-level z-score row computed in double precision.
pub type ZRow = evalkit::ZRow<f64>;

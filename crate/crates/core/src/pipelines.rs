//! Answer-producing pipelines.
//!
//! * vanilla: the generator answers from its own knowledge;
//! * rag_doc / rag_triple: top-k abstracts or linearized triples are placed
//!   in the prompt as context;
//! * insight: an identifier model turns the task into sentence fragments, a
//!   miner model trained on the corpus completes them, and the generator
//!   answers with the completed fragments as context.
//!
//! The matching task reuses the same three shapes with its own prompts.
//! Every run produces a [`RunRecord`] holding all prompts and raw outputs.

pub mod mocks;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::benchbuild::{BenchmarkItem, ItemKind};
use crate::corpus::CorpusHandle;
use crate::gateway::{ChatMessage, Gateway, GatewayError, Usage};
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::retrieval::{Embedder, Granularity, RetrievalError};
use crate::scalar::Scalar;
use crate::text::{collapse_ws, token_count, truncate_tokens};

pub use parse::{parse_insights, parse_matching_answer};

/// Separates retrieved payloads inside a context block.
pub const CONTEXT_SEPARATOR: &str = "\n\n";
/// Joins an insight fragment and its completion.
pub const INSIGHT_ARROW: &str = " → ";

const IDENTIFIER_REPROMPT: &str =
    "Your answer could not be parsed. Return only the list of dictionaries with the keys \"Insight\" and \"Multi-answer\", with no additional commentary.";
const MATCHING_REPROMPT: &str =
    "Your answer could not be parsed. Respond only with a JSON object with the keys \"explanation\" and \"answer\", where \"answer\" is \"Yes\" or \"No\".";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Model {
        stage: &'static str,
        #[source]
        source: GatewayError,
    },
    #[error("{stage}: unparseable model output after retry: {raw:?}")]
    Unparseable { stage: &'static str, raw: String },
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Unsupported(String),
}

/// An identified insight: a fragment for the miner to complete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightQuery {
    pub fragment: String,
    pub multi_answer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Vanilla,
    RagDoc,
    RagTriple,
    Insight,
}

impl PipelineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::Vanilla => "vanilla",
            PipelineKind::RagDoc => "rag_doc",
            PipelineKind::RagTriple => "rag_triple",
            PipelineKind::Insight => "insight",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(PipelineKind::Vanilla),
            "rag_doc" => Ok(PipelineKind::RagDoc),
            "rag_triple" => Ok(PipelineKind::RagTriple),
            "insight" => Ok(PipelineKind::Insight),
            other => Err(format!("unknown pipeline {other:?}")),
        }
    }
}

/// Matching-task modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    Vanilla,
    Rag1,
    Insight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightTrace {
    pub insight: InsightQuery,
    pub completion: String,
}

/// Full trace of one pipeline execution on one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub pipeline: PipelineKind,
    /// Documents/triples retrieved, or insights mined.
    pub k_or_m: usize,
    pub prompts: Vec<String>,
    pub raw_outputs: Vec<String>,
    pub parsed_answer: String,
    #[serde(default)]
    pub insights: Vec<InsightTrace>,
    /// The identifier found nothing and the vanilla prompt was used.
    #[serde(default)]
    pub fallback: bool,
    pub timing_ms: u64,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    fn new(item_id: &str, pipeline: PipelineKind, k_or_m: usize) -> Self {
        Self {
            item_id: item_id.to_string(),
            pipeline,
            k_or_m,
            prompts: Vec::new(),
            raw_outputs: Vec::new(),
            parsed_answer: String::new(),
            insights: Vec::new(),
            fallback: false,
            timing_ms: 0,
            usage: Usage::default(),
            error: None,
        }
    }

    /// Sends `messages`, logging the final user turn and the reply.
    fn call(&mut self, gateway: &Gateway, stage: &'static str, messages: &[ChatMessage]) -> Result<String, PipelineError> {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.clone())
            .unwrap_or_default();
        let reply = gateway
            .chat(messages)
            .map_err(|source| PipelineError::Model { stage, source })?;
        self.absorb(prompt, reply.text.clone(), reply.usage, reply.latency_ms);
        Ok(reply.text)
    }

    fn absorb(&mut self, prompt: String, output: String, usage: Usage, latency_ms: u64) {
        self.prompts.push(prompt);
        self.raw_outputs.push(output);
        self.usage += usage;
        self.timing_ms += latency_ms;
    }

    /// The context block of the last rendered QA prompt, if any.
    pub fn context_block(&self) -> Option<&str> {
        self.prompts
            .last()
            .and_then(|p| p.split_once("\nContext: "))
            .map(|(_, ctx)| ctx)
    }
}

/// How many miner samples to draw per insight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightOptions {
    pub n_samples_single: usize,
    pub n_samples_multi: usize,
}

impl Default for InsightOptions {
    fn default() -> Self {
        Self {
            n_samples_single: 1,
            n_samples_multi: 10,
        }
    }
}

fn identify_into(
    record: &mut RunRecord,
    input_text: &str,
    identifier: &Gateway,
    prompts: &PromptSet,
) -> Result<Vec<InsightQuery>, PipelineError> {
    let prompt = prompts.render(PromptKind::Identifier, &[input_text])?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let raw = record.call(identifier, "identifier", &messages)?;
    if let Some(insights) = parse_insights(&raw) {
        return Ok(insights);
    }
    messages.push(ChatMessage::assistant(raw));
    messages.push(ChatMessage::user(IDENTIFIER_REPROMPT));
    let raw = record.call(identifier, "identifier", &messages)?;
    parse_insights(&raw).ok_or(PipelineError::Unparseable {
        stage: "identifier",
        raw,
    })
}

/// Renders the identifier prompt for `input_text` and parses the insights.
/// One reprompt is made when the first reply does not parse.
pub fn identify_insights(input_text: &str, identifier: &Gateway, prompts: &PromptSet) -> Result<Vec<InsightQuery>, PipelineError> {
    let mut scratch = RunRecord::new("", PipelineKind::Insight, 0);
    identify_into(&mut scratch, input_text, identifier, prompts)
}

/// Mines each insight and returns the context lines `fragment → completion`,
/// each at most the miner's `max_tokens` whitespace tokens long.
fn mine_into(
    record: &mut RunRecord,
    insights: &[InsightQuery],
    miner: &Gateway,
    options: &InsightOptions,
) -> Result<Vec<String>, PipelineError> {
    let cap = miner.handle().max_tokens as usize;
    let mut lines = Vec::with_capacity(insights.len());
    for insight in insights {
        let n = if insight.multi_answer {
            options.n_samples_multi
        } else {
            options.n_samples_single
        };
        let outputs = miner
            .complete_insight(&insight.fragment, n)
            .map_err(|source| PipelineError::Model { stage: "miner", source })?;
        let mut distinct: Vec<String> = Vec::new();
        for output in outputs {
            let text = collapse_ws(&output.text);
            record.absorb(insight.fragment.clone(), output.text, output.usage, output.latency_ms);
            if !text.is_empty() && !distinct.contains(&text) {
                distinct.push(text);
            }
        }
        // The whole line, fragment included, stays within the miner's cap.
        let budget = cap.saturating_sub(token_count(&insight.fragment) + 1);
        let completion = truncate_tokens(&distinct.join("; "), budget);
        let line = format!("{}{INSIGHT_ARROW}{completion}", insight.fragment);
        lines.push(if token_count(&line) > cap {
            truncate_tokens(&line, cap)
        } else {
            line
        });
        record.insights.push(InsightTrace {
            insight: insight.clone(),
            completion,
        });
    }
    Ok(lines)
}

fn qa_only(item: &BenchmarkItem) -> Result<(), PipelineError> {
    if item.kind == ItemKind::Matching {
        return Err(PipelineError::Unsupported(format!(
            "{} is a matching item; use run_matching",
            item.id
        )));
    }
    Ok(())
}

fn answer_qa(record: &mut RunRecord, generator: &Gateway, prompt: String) -> Result<(), PipelineError> {
    let raw = record.call(generator, "generator", &[ChatMessage::user(prompt)])?;
    record.parsed_answer = raw.trim().to_string();
    Ok(())
}

/// The generator answers the question without context.
pub fn run_vanilla(item: &BenchmarkItem, generator: &Gateway, prompts: &PromptSet) -> Result<RunRecord, PipelineError> {
    qa_only(item)?;
    let mut record = RunRecord::new(&item.id, PipelineKind::Vanilla, 0);
    let prompt = prompts.render(PromptKind::Qa, &[&item.question])?;
    answer_qa(&mut record, generator, prompt)?;
    Ok(record)
}

/// Joins payloads in rank order into one context block.
pub fn render_context(payloads: &[&str]) -> String {
    payloads
        .iter()
        .map(|p| collapse_ws(p))
        .collect::<Vec<_>>()
        .join(CONTEXT_SEPARATOR)
}

/// Conventional RAG over a document or triple index.
pub fn run_rag<T: Scalar>(
    item: &BenchmarkItem,
    index: &crate::retrieval::VectorIndex<T>,
    embedder: &dyn Embedder,
    k: usize,
    generator: &Gateway,
    prompts: &PromptSet,
) -> Result<RunRecord, PipelineError> {
    qa_only(item)?;
    let k = k.max(1);
    let pipeline = match index.granularity() {
        Granularity::Document => PipelineKind::RagDoc,
        Granularity::Triple => PipelineKind::RagTriple,
    };
    let result = crate::retrieval::top_k(index, &item.question, k, embedder)?;
    let payloads: Vec<&str> = result
        .keys()
        .map(|key| index.payload(key).unwrap_or(""))
        .collect();
    let mut record = RunRecord::new(&item.id, pipeline, k);
    let prompt = prompts.render(PromptKind::AugmentedQa, &[&item.question, &render_context(&payloads)])?;
    answer_qa(&mut record, generator, prompt)?;
    Ok(record)
}

/// Insight-RAG on a question: identify, mine the first `m` insights, answer.
/// With no insights identified the vanilla prompt is used and the record is
/// flagged as a fallback.
pub fn run_insight_rag(
    item: &BenchmarkItem,
    identifier: &Gateway,
    miner: &Gateway,
    generator: &Gateway,
    m: usize,
    options: &InsightOptions,
    prompts: &PromptSet,
) -> Result<RunRecord, PipelineError> {
    qa_only(item)?;
    let m = m.max(1);
    let mut record = RunRecord::new(&item.id, PipelineKind::Insight, m);
    let mut insights = identify_into(&mut record, &item.question, identifier, prompts)?;
    if insights.is_empty() {
        record.fallback = true;
        let prompt = prompts.render(PromptKind::Qa, &[&item.question])?;
        answer_qa(&mut record, generator, prompt)?;
        return Ok(record);
    }
    insights.truncate(m);
    let lines = mine_into(&mut record, &insights, miner, options)?;
    let prompt = prompts.render(PromptKind::AugmentedQa, &[&item.question, &lines.join("\n")])?;
    answer_qa(&mut record, generator, prompt)?;
    Ok(record)
}

/// Models and data the matching task may need beyond the generator.
pub struct MatchingContext<'a, T: Scalar> {
    pub corpus: &'a CorpusHandle,
    pub doc_index: Option<(&'a crate::retrieval::VectorIndex<T>, &'a dyn Embedder)>,
    pub identifier: Option<&'a Gateway>,
    pub miner: Option<&'a Gateway>,
    pub options: InsightOptions,
}

fn answer_matching(record: &mut RunRecord, generator: &Gateway, prompt: String) -> Result<(), PipelineError> {
    let mut messages = vec![ChatMessage::user(prompt)];
    let raw = record.call(generator, "generator", &messages)?;
    if let Some(answer) = parse_matching_answer(&raw) {
        record.parsed_answer = answer.to_string();
        return Ok(());
    }
    messages.push(ChatMessage::assistant(raw));
    messages.push(ChatMessage::user(MATCHING_REPROMPT));
    let raw = record.call(generator, "generator", &messages)?;
    match parse_matching_answer(&raw) {
        Some(answer) => {
            record.parsed_answer = answer.to_string();
            Ok(())
        }
        None => Err(PipelineError::Unparseable {
            stage: "generator",
            raw,
        }),
    }
}

/// Decides whether the pair's papers should cite each other; the parsed
/// answer is `"Yes"` or `"No"`.
pub fn run_matching<T: Scalar>(
    item: &BenchmarkItem,
    mode: MatchingMode,
    m: usize,
    ctx: &MatchingContext<'_, T>,
    generator: &Gateway,
    prompts: &PromptSet,
) -> Result<RunRecord, PipelineError> {
    let pair = item
        .pair
        .as_ref()
        .filter(|_| item.kind == ItemKind::Matching)
        .ok_or_else(|| PipelineError::Unsupported(format!("{} is not a matching item", item.id)))?;
    let abstract_of = |id: &str| {
        ctx.corpus
            .get(id)
            .map(|d| d.abstract_text.clone())
            .ok_or_else(|| PipelineError::Unsupported(format!("{}: document {id} not in corpus", item.id)))
    };
    let paper_a = abstract_of(&pair.doc_a)?;
    let paper_b = abstract_of(&pair.doc_b)?;
    match mode {
        MatchingMode::Vanilla => {
            let mut record = RunRecord::new(&item.id, PipelineKind::Vanilla, 0);
            let prompt = prompts.render(PromptKind::Matching, &[&paper_a, &paper_b])?;
            answer_matching(&mut record, generator, prompt)?;
            Ok(record)
        }
        MatchingMode::Rag1 => {
            let (index, embedder) = ctx
                .doc_index
                .ok_or_else(|| PipelineError::Unsupported("matching rag1 needs a document index".into()))?;
            let query = format!("{paper_a}\n\n{paper_b}");
            let vector = crate::retrieval::embed::<T>(&[query], embedder, &Default::default())?
                .pop()
                .expect("one vector");
            let hits = index.search_filtered(&vector, 1, |key| key != pair.doc_a && key != pair.doc_b);
            let mut paper_b_ctx = paper_b.clone();
            if let Some((key, _)) = hits.first() {
                paper_b_ctx.push_str("\n\nContext: ");
                paper_b_ctx.push_str(&collapse_ws(index.payload(key).unwrap_or("")));
            }
            let mut record = RunRecord::new(&item.id, PipelineKind::RagDoc, 1);
            let prompt = prompts.render(PromptKind::Matching, &[&paper_a, &paper_b_ctx])?;
            answer_matching(&mut record, generator, prompt)?;
            Ok(record)
        }
        MatchingMode::Insight => {
            let identifier = ctx
                .identifier
                .ok_or_else(|| PipelineError::Unsupported("matching insight mode needs an identifier".into()))?;
            let miner = ctx
                .miner
                .ok_or_else(|| PipelineError::Unsupported("matching insight mode needs a miner".into()))?;
            let m = m.max(1);
            let mut record = RunRecord::new(&item.id, PipelineKind::Insight, m);
            let task = prompts.render(PromptKind::Matching, &[&paper_a, &paper_b])?;
            let mut insights = identify_into(&mut record, &task, identifier, prompts)?;
            if insights.is_empty() {
                record.fallback = true;
                answer_matching(&mut record, generator, task)?;
                return Ok(record);
            }
            insights.truncate(m);
            let lines = mine_into(&mut record, &insights, miner, &ctx.options)?;
            let prompt = prompts.render(PromptKind::AugmentedMatching, &[&paper_a, &paper_b, &lines.join("\n")])?;
            answer_matching(&mut record, generator, prompt)?;
            Ok(record)
        }
    }
}

/// Everything a benchmark run may draw on.
pub struct RunContext<'a, T: Scalar> {
    pub prompts: &'a PromptSet,
    pub generator: &'a Gateway,
    pub identifier: Option<&'a Gateway>,
    pub miner: Option<&'a Gateway>,
    pub corpus: Option<&'a CorpusHandle>,
    pub doc_index: Option<&'a crate::retrieval::VectorIndex<T>>,
    pub triple_index: Option<&'a crate::retrieval::VectorIndex<T>>,
    pub embedder: Option<&'a dyn Embedder>,
    pub options: InsightOptions,
}

impl<T: Scalar> RunContext<'_, T> {
    fn require<'b, X: ?Sized>(value: Option<&'b X>, what: &str) -> Result<&'b X, PipelineError> {
        value.ok_or_else(|| PipelineError::Unsupported(format!("run needs {what}")))
    }

    /// Runs one item through `pipeline`; `k_or_m` is k for RAG, m for insight.
    pub fn run_item(&self, item: &BenchmarkItem, pipeline: PipelineKind, k_or_m: usize) -> Result<RunRecord, PipelineError> {
        if item.kind == ItemKind::Matching {
            let corpus = Self::require(self.corpus, "a corpus for matching items")?;
            let doc_index = match (self.doc_index, self.embedder) {
                (Some(index), Some(embedder)) => Some((index, embedder)),
                _ => None,
            };
            let ctx = MatchingContext {
                corpus,
                doc_index,
                identifier: self.identifier,
                miner: self.miner,
                options: self.options,
            };
            let mode = match pipeline {
                PipelineKind::Vanilla => MatchingMode::Vanilla,
                PipelineKind::RagDoc => MatchingMode::Rag1,
                PipelineKind::Insight => MatchingMode::Insight,
                PipelineKind::RagTriple => {
                    return Err(PipelineError::Unsupported("rag_triple does not apply to matching items".into()))
                }
            };
            return run_matching(item, mode, k_or_m, &ctx, self.generator, self.prompts);
        }
        match pipeline {
            PipelineKind::Vanilla => run_vanilla(item, self.generator, self.prompts),
            PipelineKind::RagDoc => run_rag(
                item,
                Self::require(self.doc_index, "a document index")?,
                Self::require(self.embedder, "an embedder")?,
                k_or_m,
                self.generator,
                self.prompts,
            ),
            PipelineKind::RagTriple => run_rag(
                item,
                Self::require(self.triple_index, "a triple index")?,
                Self::require(self.embedder, "an embedder")?,
                k_or_m,
                self.generator,
                self.prompts,
            ),
            PipelineKind::Insight => run_insight_rag(
                item,
                Self::require(self.identifier, "an identifier model")?,
                Self::require(self.miner, "a miner model")?,
                self.generator,
                k_or_m,
                &self.options,
                self.prompts,
            ),
        }
    }

    /// Runs every item, `parallelism` at a time. Records come back in item
    /// order; an item that fails yields a record carrying the error.
    pub fn run_all(&self, items: &[BenchmarkItem], pipeline: PipelineKind, k_or_m: usize, parallelism: usize) -> Vec<RunRecord> {
        use rayon::prelude::*;
        let run = |item: &BenchmarkItem| {
            self.run_item(item, pipeline, k_or_m).unwrap_or_else(|err| {
                log::warn!("{} ({pipeline}, {k_or_m}): {err}", item.id);
                let mut record = RunRecord::new(&item.id, pipeline, k_or_m);
                record.error = Some(err.to_string());
                record
            })
        };
        match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(run).collect()),
            Err(_) => items.iter().map(run).collect(),
        }
    }
}

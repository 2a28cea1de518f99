//! Mock backends that make the pipelines testable without a model server.
//!
//! The oracle mocks read the benchmark: the identifier maps a question to its
//! gold subject–relation fragment and the miner maps that fragment to the
//! gold objects. Paired with [`extractive_generator`] they reproduce the gold
//! answer exactly, which pins down the plumbing independently of any model.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::INSIGHT_ARROW;
use crate::benchbuild::{BenchmarkItem, ItemKind};
use crate::gateway::mock::{CannedMock, FnMock, MockKb};
use crate::gateway::ChatBackend;
use crate::text::fold;

/// Reply used by [`MockSpec::Sentinel`] unless configured otherwise.
pub const DEFAULT_SENTINEL: &str = "zzq-sentinel";

/// Text following the last occurrence of `marker`, if any.
fn after_last<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.rfind(marker).map(|i| &text[i + marker.len()..])
}

fn identifier_reply(fragment: &str, multi: bool) -> String {
    json!([{"Insight": fragment, "Multi-answer": multi}]).to_string()
}

/// Identifier that knows each question's gold subject and relation.
///
/// Unknown tasks that contain a paper pair get the first four words of
/// Paper-B as their only insight; anything else gets `[{}]`.
pub fn oracle_identifier(items: &[BenchmarkItem]) -> FnMock {
    let mut known: BTreeMap<String, String> = BTreeMap::new();
    for item in items {
        if item.kind == ItemKind::Matching {
            continue;
        }
        if let Some(fragment) = item.gold_insight() {
            known.insert(fold(&item.question), identifier_reply(&fragment, item.kind == ItemKind::Multi));
        }
    }
    FnMock::new("oracle-identifier", move |request| {
        let prompt = request
            .messages
            .iter()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let task = after_last(prompt, "Task:\n").unwrap_or(prompt);
        if let Some(reply) = known.get(&fold(task)) {
            return Ok(reply.clone());
        }
        if let Some(paper_b) = after_last(task, "Paper-B:\n") {
            let words: Vec<&str> = paper_b.split_whitespace().take(4).collect();
            if !words.is_empty() {
                return Ok(identifier_reply(&words.join(" "), false));
            }
        }
        Ok("[{}]".to_string())
    })
}

/// Miner that completes each gold fragment with its gold object(s).
pub fn oracle_miner(items: &[BenchmarkItem]) -> MockKb {
    let mut kb = MockKb::new();
    for item in items {
        if let Some(fragment) = item.gold_insight() {
            kb.insert(&fragment, item.golds.iter().cloned());
        }
    }
    kb
}

/// Generator that copies its answer out of the prompt.
///
/// QA prompts: the completion of the first `fragment → completion` line, or
/// else the first context segment, or `""` with no context. Matching
/// prompts: `Yes` when any context or insight text is present, else `No`.
pub fn extractive_generator() -> FnMock {
    FnMock::new("extractive", |request| {
        let prompt = request.last_user_message();
        if prompt.contains("Paper-A:") {
            let has_insight = after_last(prompt, "Useful insights:\n").is_some_and(|s| {
                s.lines()
                    .any(|l| l.split_once(INSIGHT_ARROW.trim()).is_some_and(|(_, c)| !c.trim().is_empty()))
            });
            let answer = if has_insight || prompt.contains("\n\nContext: ") {
                "Yes"
            } else {
                "No"
            };
            return Ok(json!({"explanation": "mock", "answer": answer}).to_string());
        }
        let Some((_, context)) = prompt.split_once("\nContext: ") else {
            return Ok(String::new());
        };
        if let Some(line) = context.lines().find(|l| l.contains(INSIGHT_ARROW)) {
            let (_, completion) = line.split_once(INSIGHT_ARROW).expect("line contains the arrow");
            return Ok(completion.trim().to_string());
        }
        Ok(context.split("\n\n").next().unwrap_or("").trim().to_string())
    })
}

/// Extractor that reads each sentence `S R O...` of the abstract as the
/// triple `S | R | O...`; sentences under three words are skipped.
pub fn sentence_extractor() -> FnMock {
    FnMock::new("sentence-extractor", |request| {
        let prompt = request.last_user_message();
        let abstract_text = after_last(prompt, "\nAbstract: ").unwrap_or("");
        let lines: Vec<String> = abstract_text
            .split(['.', '\n'])
            .filter_map(|sentence| {
                let words: Vec<&str> = sentence.split_whitespace().collect();
                (words.len() >= 3).then(|| format!("{} | {} | {}", words[0], words[1], words[2..].join(" ")))
            })
            .collect();
        Ok(lines.join("\n"))
    })
}

/// Question generator that turns subject and relation into a template
/// question; the plural form is used when the prompt asks for several
/// answers.
pub fn template_qgen() -> FnMock {
    FnMock::new("template-qgen", |request| {
        let prompt = request
            .messages
            .iter()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let field = |name: &str| {
            prompt
                .lines()
                .find_map(|l| l.strip_prefix(name))
                .map(str::trim)
                .unwrap_or("")
                .to_string()
        };
        let subject = field("Subject:");
        let relation = field("Relation:");
        let plural = field("Expected answer form:").contains("several");
        Ok(if plural {
            format!("What are the things {subject} {relation}?")
        } else {
            format!("What does {subject} {relation}?")
        })
    })
}

/// Declarative mock selection, usable from configuration files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MockSpec {
    /// Cycles through fixed replies.
    Canned {
        replies: Vec<String>,
        #[serde(default)]
        latency_ms: u64,
    },
    /// Looks the prompt up in a table (case- and whitespace-insensitive).
    Kb {
        entries: BTreeMap<String, Vec<String>>,
        #[serde(default)]
        default: String,
    },
    OracleIdentifier,
    OracleMiner,
    /// Always replies with a fixed non-gold string.
    Sentinel {
        #[serde(default = "default_sentinel")]
        text: String,
    },
    Extractive,
    SentenceExtractor,
    TemplateQgen,
}

fn default_sentinel() -> String {
    DEFAULT_SENTINEL.to_string()
}

impl MockSpec {
    /// Builds the backend; oracle specs read `bench`.
    pub fn build(&self, bench: &[BenchmarkItem]) -> Arc<dyn ChatBackend> {
        match self {
            MockSpec::Canned { replies, latency_ms } => {
                let replies = if replies.is_empty() {
                    vec![String::new()]
                } else {
                    replies.clone()
                };
                Arc::new(CannedMock::new(replies).with_latency(*latency_ms))
            }
            MockSpec::Kb { entries, default } => {
                let mut kb = MockKb::new().with_default(default.clone());
                for (key, values) in entries {
                    kb.insert(key, values.iter().cloned());
                }
                Arc::new(kb)
            }
            MockSpec::OracleIdentifier => Arc::new(oracle_identifier(bench)),
            MockSpec::OracleMiner => Arc::new(oracle_miner(bench)),
            MockSpec::Sentinel { text } => Arc::new(CannedMock::fixed(text.clone())),
            MockSpec::Extractive => Arc::new(extractive_generator()),
            MockSpec::SentenceExtractor => Arc::new(sentence_extractor()),
            MockSpec::TemplateQgen => Arc::new(template_qgen()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, ChatRequest};

    fn request(prompt: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    #[test]
    fn extractive_prefers_insight_lines() {
        let g = extractive_generator();
        let reply = g
            .send(&request("Question: q\nContext: a uses → b\nc is → d"))
            .unwrap();
        assert_eq!(reply.text, "b");
        let reply = g.send(&request("Question: q\nContext: first doc\n\nsecond doc")).unwrap();
        assert_eq!(reply.text, "first doc");
        assert_eq!(g.send(&request("Question: q")).unwrap().text, "");
    }

    #[test]
    fn sentence_extractor_splits_sentences() {
        let e = sentence_extractor();
        let reply = e
            .send(&request("Title: t\nAbstract: Foo uses bar baz. Too short. Qux improves speed."))
            .unwrap();
        assert_eq!(reply.text, "Foo | uses | bar baz\nQux | improves | speed");
    }

    #[test]
    fn template_qgen_plural() {
        let q = template_qgen();
        let prompt = "Subject: X\nRelation: includes\nExpected answer form: several answers (ask in the plural)";
        assert_eq!(q.send(&request(prompt)).unwrap().text, "What are the things X includes?");
    }

    #[test]
    fn mock_spec_round_trips_through_toml_like_json() {
        let spec: MockSpec = serde_json::from_str(r#"{"kind": "sentinel"}"#).unwrap();
        assert_eq!(
            spec,
            MockSpec::Sentinel {
                text: DEFAULT_SENTINEL.into()
            }
        );
        assert!(serde_json::from_str::<MockSpec>(r#"{"kind": "nope"}"#).is_err());
    }
}

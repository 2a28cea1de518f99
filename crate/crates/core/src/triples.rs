//! Knowledge triples: extraction from abstracts, normalization, noise
//! filtering and the subject–relation index the benchmark filters query.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::gateway::{Gateway, GatewayError};
use crate::io::{self, IoError};
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::text::{collapse_ws, fold};

#[derive(Debug, thiserror::Error)]
pub enum TripleError {
    #[error("extraction for {doc_id} failed: {source}")]
    Extraction {
        doc_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}:{line}: {message}")]
    Rules {
        path: String,
        line: usize,
        message: String,
    },
    #[error("relation rules are not idempotent: canonical {canonical:?} is rewritten to {rewritten:?}")]
    NonIdempotentRules { canonical: String, rewritten: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    #[serde(rename = "s")]
    pub subject: String,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(rename = "o")]
    pub object: String,
    #[serde(rename = "doc")]
    pub doc_id: String,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str, doc_id: &str) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            doc_id: doc_id.into(),
        }
    }

    /// `"subject relation object"`, the text form used for retrieval.
    pub fn linearize(&self) -> String {
        format!("{} {} {}", self.subject, self.relation, self.object)
    }
}

/// Triples parsed from one model reply.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub triples: Vec<Triple>,
    /// Non-blank lines that did not parse as a triple.
    pub skipped: usize,
}

/// Parses `subject | relation | object` lines, tolerating list markers,
/// wrapping brackets and quotes. Exact duplicates keep their first position.
pub fn parse_triple_lines(output: &str, doc_id: &str) -> Extraction {
    let mut seen = HashSet::new();
    let mut extraction = Extraction::default();
    for line in output.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_triple_line(line) {
            Some((s, r, o)) => {
                let triple = Triple::new(&s, &r, &o, doc_id);
                if seen.insert(triple.clone()) {
                    extraction.triples.push(triple);
                }
            }
            None => extraction.skipped += 1,
        }
    }
    extraction
}

fn parse_triple_line(line: &str) -> Option<(String, String, String)> {
    let line = strip_list_marker(line);
    let line = line
        .trim_start_matches(['(', '<', '['])
        .trim_end_matches([')', '>', ']', '.'])
        .trim();
    let parts: Vec<String> = line
        .split('|')
        .map(|p| collapse_ws(p.trim().trim_matches(['"', '\''])))
        .collect();
    match parts.as_slice() {
        [s, r, o] if !s.is_empty() && !r.is_empty() && !o.is_empty() => {
            Some((s.clone(), r.clone(), o.clone()))
        }
        _ => None,
    }
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

/// Runs the extractor over one abstract.
pub fn extract_triples(doc: &Document, extractor: &Gateway, prompts: &PromptSet) -> Result<Extraction, TripleError> {
    let prompt = prompts.render(PromptKind::ExtractTriples, &[&doc.title, &doc.abstract_text])?;
    let reply = extractor.ask(&prompt).map_err(|source| TripleError::Extraction {
        doc_id: doc.id.clone(),
        source,
    })?;
    let extraction = parse_triple_lines(&reply.text, &doc.id);
    if extraction.skipped > 0 {
        log::debug!("{}: skipped {} unparseable line(s)", doc.id, extraction.skipped);
    }
    Ok(extraction)
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Relation normalization settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationRules {
    pub case_fold: bool,
    pub strip_articles: bool,
    canonical_map: Vec<(String, String)>,
}

impl Default for RelationRules {
    fn default() -> Self {
        Self {
            case_fold: true,
            strip_articles: true,
            canonical_map: Vec::new(),
        }
    }
}

impl RelationRules {
    /// Builds rules whose rewrites are whole-relation matches, applied in order.
    ///
    /// Patterns and canonical forms are preprocessed like relations. Rule sets
    /// where a canonical form would itself be rewritten are rejected, which
    /// keeps normalization idempotent.
    pub fn new(
        case_fold: bool,
        strip_articles: bool,
        canonical_map: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, TripleError> {
        let mut rules = Self {
            case_fold,
            strip_articles,
            canonical_map: Vec::new(),
        };
        let map: Vec<(String, String)> = canonical_map
            .into_iter()
            .map(|(p, c)| (rules.preprocess(&p), rules.preprocess(&c)))
            .collect();
        rules.canonical_map = map;
        for (_, canonical) in &rules.canonical_map {
            let rewritten = rules.apply(canonical);
            if &rewritten != canonical {
                return Err(TripleError::NonIdempotentRules {
                    canonical: canonical.clone(),
                    rewritten,
                });
            }
        }
        Ok(rules)
    }

    /// Reads `pattern<TAB>canonical` lines; `#` comments and blank lines are skipped.
    pub fn load(path: &Path, case_fold: bool, strip_articles: bool) -> Result<Self, TripleError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), case_fold, strip_articles)
    }

    pub fn parse(text: &str, origin: &str, case_fold: bool, strip_articles: bool) -> Result<Self, TripleError> {
        let mut map = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                [pattern, canonical] if !pattern.trim().is_empty() && !canonical.trim().is_empty() => {
                    map.push((pattern.to_string(), canonical.to_string()))
                }
                _ => {
                    return Err(TripleError::Rules {
                        path: origin.to_string(),
                        line: idx + 1,
                        message: "expected pattern<TAB>canonical".into(),
                    })
                }
            }
        }
        Self::new(case_fold, strip_articles, map)
    }

    pub fn canonical_map(&self) -> &[(String, String)] {
        &self.canonical_map
    }

    fn preprocess(&self, relation: &str) -> String {
        let relation = if self.case_fold {
            relation.to_lowercase()
        } else {
            relation.to_string()
        };
        if self.strip_articles {
            relation
                .split_whitespace()
                .filter(|w| !ARTICLES.iter().any(|a| w.eq_ignore_ascii_case(a)))
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            collapse_ws(&relation)
        }
    }

    /// Normalizes one relation string.
    pub fn apply(&self, relation: &str) -> String {
        let mut relation = self.preprocess(relation);
        for (pattern, canonical) in &self.canonical_map {
            if &relation == pattern {
                relation = canonical.clone();
            }
        }
        relation
    }
}

/// Case-folds and whitespace-collapses subjects and objects, normalizes
/// relations, drops triples left with an empty field and removes duplicates.
pub fn normalize_relations(triples: &[Triple], rules: &RelationRules) -> Vec<Triple> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(triples.len());
    for t in triples {
        let normalized = Triple {
            subject: fold(&t.subject),
            relation: rules.apply(&t.relation),
            object: fold(&t.object),
            doc_id: t.doc_id.clone(),
        };
        if normalized.subject.is_empty() || normalized.relation.is_empty() || normalized.object.is_empty() {
            continue;
        }
        if seen.insert(normalized.clone()) {
            out.push(normalized);
        }
    }
    out
}

/// Terms that make a subject or object too vague to ask about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopList(BTreeSet<String>);

impl Default for StopList {
    fn default() -> Self {
        Self::parse(include_str!("../templates/stoplist.txt"))
    }
}

impl StopList {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(fold)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, TripleError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, term: &str) -> bool {
        self.0.contains(&fold(term))
    }

    /// Splits `triples` into kept ones and the count dropped as noise.
    pub fn filter(&self, triples: Vec<Triple>) -> (Vec<Triple>, usize) {
        let before = triples.len();
        let kept: Vec<Triple> = triples
            .into_iter()
            .filter(|t| !self.contains(&t.subject) && !self.contains(&t.object))
            .collect();
        let dropped = before - kept.len();
        (kept, dropped)
    }
}

/// An `(object, doc_id)` pair stored under a subject–relation key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IndexEntry {
    pub object: String,
    pub doc_id: String,
}

/// Triples grouped by `(subject, relation)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleIndex {
    by_sr: BTreeMap<(String, String), Vec<IndexEntry>>,
    triple_count: usize,
}

impl TripleIndex {
    pub fn triple_count(&self) -> usize {
        self.triple_count
    }

    pub fn key_count(&self) -> usize {
        self.by_sr.len()
    }

    pub fn get(&self, subject: &str, relation: &str) -> Option<&[IndexEntry]> {
        self.by_sr
            .get(&(subject.to_string(), relation.to_string()))
            .map(Vec::as_slice)
    }

    /// Keys in ascending order with their entries.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[IndexEntry])> {
        self.by_sr
            .iter()
            .map(|((s, r), entries)| (s.as_str(), r.as_str(), entries.as_slice()))
    }
}

/// Groups normalized triples; entries are ordered by `(doc_id, object)`.
pub fn index_triples(triples: &[Triple]) -> TripleIndex {
    let mut groups: BTreeMap<(String, String), BTreeSet<(String, String)>> = BTreeMap::new();
    for t in triples {
        groups
            .entry((t.subject.clone(), t.relation.clone()))
            .or_default()
            .insert((t.doc_id.clone(), t.object.clone()));
    }
    let mut triple_count = 0;
    let by_sr = groups
        .into_iter()
        .map(|(key, set)| {
            triple_count += set.len();
            let entries = set
                .into_iter()
                .map(|(doc_id, object)| IndexEntry { object, doc_id })
                .collect();
            (key, entries)
        })
        .collect();
    TripleIndex { by_sr, triple_count }
}

pub fn read_triples(path: &Path) -> Result<Vec<Triple>, TripleError> {
    Ok(io::read_jsonl(path)?)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<usize, TripleError> {
    Ok(io::write_jsonl(path, triples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{CannedMock, FailingMock};
    use crate::gateway::{ModelHandle, Role};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn doc() -> Document {
        Document {
            id: "d1".into(),
            title: "T".into(),
            abstract_text: "BERT uses transformers.".into(),
            neighbors: Default::default(),
            token_count: 3,
        }
    }

    fn extractor(reply: &str) -> Gateway {
        Gateway::new(ModelHandle::mock(Role::Extractor), Arc::new(CannedMock::fixed(reply))).unwrap()
    }

    #[test]
    fn extracts_single_triple() {
        let got = extract_triples(&doc(), &extractor("BERT | uses | transformers"), &PromptSet::default()).unwrap();
        assert_eq!(got.triples, vec![Triple::new("BERT", "uses", "transformers", "d1")]);
        assert_eq!(got.skipped, 0);
    }

    #[test]
    fn empty_output_is_empty_list() {
        let got = extract_triples(&doc(), &extractor(""), &PromptSet::default()).unwrap();
        assert!(got.triples.is_empty());
    }

    #[test]
    fn duplicate_lines_collapse_and_garbage_is_counted() {
        let got = parse_triple_lines("a | b | c\na | b | c\nnot a triple\n1. (x | y | z).\n- \"p\" | q | 'r'\n", "d");
        assert_eq!(
            got.triples,
            vec![Triple::new("a", "b", "c", "d"), Triple::new("x", "y", "z", "d"), Triple::new("p", "q", "r", "d")]
        );
        assert_eq!(got.skipped, 1);
    }

    #[test]
    fn transport_failure_names_document() {
        let mut handle = ModelHandle::mock(Role::Extractor);
        handle.retry_limit = 0;
        let gateway = Gateway::new(handle, Arc::new(FailingMock::transport())).unwrap();
        let err = extract_triples(&doc(), &gateway, &PromptSet::default()).unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");
    }

    #[test]
    fn case_fold_dedups() {
        let out = normalize_relations(
            &[Triple::new("BERT", "Uses", "Transformers", "d1"), Triple::new("bert", "uses", "transformers", "d1")],
            &RelationRules::default(),
        );
        assert_eq!(out, vec![Triple::new("bert", "uses", "transformers", "d1")]);
    }

    #[test]
    fn canonical_map_rewrites_and_is_idempotent() {
        let rules = RelationRules::parse("is based on\tbased on\n", "mem", true, false).unwrap();
        let once = normalize_relations(&[Triple::new("x", "Is  based on", "y", "d")], &rules);
        assert_eq!(once[0].relation, "based on");
        assert_eq!(normalize_relations(&once, &rules), once);
        let plain = normalize_relations(&[Triple::new("x", "Connects", "y", "d")], &rules);
        assert_eq!(plain[0].relation, "connects");
    }

    #[test]
    fn chained_rules_are_rejected() {
        let err = RelationRules::new(true, false, [("b".into(), "c".into()), ("a".into(), "b".into())]).unwrap_err();
        assert!(matches!(err, TripleError::NonIdempotentRules { .. }));
        let err = RelationRules::parse("only-one-field\n", "rules.tsv", true, false).unwrap_err();
        assert!(err.to_string().starts_with("rules.tsv:1:"));
    }

    #[test]
    fn article_stripping() {
        let rules = RelationRules::new(true, true, [("is part of".into(), "part of".into())]).unwrap();
        assert_eq!(rules.apply("is A part of"), "part of");
        assert_eq!(rules.apply("The uses"), "uses");
        assert_eq!(RelationRules::default().apply("Is  a Variant Of"), "is variant of");
    }

    #[test]
    fn stoplist_drops_vague_terms() {
        let stop = StopList::default();
        let (kept, dropped) = stop.filter(vec![
            Triple::new("we", "show", "x", "d"),
            Triple::new("bert", "uses", "it", "d"),
            Triple::new("bert", "uses", "attention", "d"),
        ]);
        assert_eq!(kept, vec![Triple::new("bert", "uses", "attention", "d")]);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn index_groups_by_subject_relation() {
        let index = index_triples(&[Triple::new("x", "uses", "b", "d2"), Triple::new("x", "uses", "a", "d1")]);
        assert_eq!(index.key_count(), 1);
        assert_eq!(index.triple_count(), 2);
        let entries = index.get("x", "uses").unwrap();
        assert_eq!(entries[0].doc_id, "d1");
        assert_eq!(index_triples(&[]).triple_count(), 0);
    }

    #[test]
    fn triple_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let triples = vec![Triple::new("a", "b", "c", "d1")];
        write_triples(&path, &triples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"s\":\"a\",\"r\":\"b\",\"o\":\"c\",\"doc\":\"d1\"}\n");
        assert_eq!(read_triples(&path).unwrap(), triples);
    }

    fn arb_triple() -> impl Strategy<Value = Triple> {
        let word = "[A-Za-z ]{0,6}|the|A|an";
        (word, prop::collection::vec(word, 1..4), word, "d[0-3]").prop_map(|(s, r, o, d)| Triple {
            subject: s,
            relation: r.join(" "),
            object: o,
            doc_id: d,
        })
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(
            triples in prop::collection::vec(arb_triple(), 0..20),
            strip in any::<bool>(),
            fold_case in any::<bool>(),
        ) {
            let rules = RelationRules::new(
                fold_case,
                strip,
                [("uses".to_string(), "use".to_string()), ("The Is".to_string(), "is".to_string())],
            );
            if let Ok(rules) = rules {
                let once = normalize_relations(&triples, &rules);
                prop_assert_eq!(normalize_relations(&once, &rules), once);
            }
        }

        #[test]
        fn index_preserves_multiplicity(triples in prop::collection::vec(arb_triple(), 0..30)) {
            let normalized = normalize_relations(&triples, &RelationRules::default());
            let index = index_triples(&normalized);
            let total: usize = index.iter().map(|(_, _, e)| e.len()).sum();
            prop_assert_eq!(total, normalized.len());
            prop_assert_eq!(index.triple_count(), normalized.len());
        }
    }
}

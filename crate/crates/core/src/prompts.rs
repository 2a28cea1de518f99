//! Prompt templates with positional `{}` slots.
//!
//! Templates are plain-text data. The defaults are compiled in from
//! `templates/`; a directory holding files of the same names overrides them.

use std::path::Path;

use crate::io::IoError;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {name} has {expected} slot(s), got {given} value(s)")]
    SlotMismatch {
        name: &'static str,
        expected: usize,
        given: usize,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Every template the toolkit renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Identifier,
    Qa,
    AugmentedQa,
    Matching,
    AugmentedMatching,
    InsightEval,
    ExtractTriples,
    QuestionGen,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::Identifier,
        PromptKind::Qa,
        PromptKind::AugmentedQa,
        PromptKind::Matching,
        PromptKind::AugmentedMatching,
        PromptKind::InsightEval,
        PromptKind::ExtractTriples,
        PromptKind::QuestionGen,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Identifier => "identifier.txt",
            PromptKind::Qa => "qa.txt",
            PromptKind::AugmentedQa => "augmented_qa.txt",
            PromptKind::Matching => "matching.txt",
            PromptKind::AugmentedMatching => "augmented_matching.txt",
            PromptKind::InsightEval => "insight_eval.txt",
            PromptKind::ExtractTriples => "extract_triples.txt",
            PromptKind::QuestionGen => "question_gen.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::Identifier => include_str!("../templates/identifier.txt"),
            PromptKind::Qa => include_str!("../templates/qa.txt"),
            PromptKind::AugmentedQa => include_str!("../templates/augmented_qa.txt"),
            PromptKind::Matching => include_str!("../templates/matching.txt"),
            PromptKind::AugmentedMatching => include_str!("../templates/augmented_matching.txt"),
            PromptKind::InsightEval => include_str!("../templates/insight_eval.txt"),
            PromptKind::ExtractTriples => include_str!("../templates/extract_triples.txt"),
            PromptKind::QuestionGen => include_str!("../templates/question_gen.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: &'static str,
    text: String,
}

impl PromptTemplate {
    /// Wraps template text; one trailing newline (the file terminator) is dropped.
    pub fn new(name: &'static str, text: &str) -> Self {
        let text = text.strip_suffix('\n').unwrap_or(text);
        Self {
            name,
            text: text.to_string(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn slot_count(&self) -> usize {
        self.text.matches("{}").count()
    }

    /// Fills the `{}` slots left to right. Substituted text is never rescanned.
    pub fn render(&self, values: &[&str]) -> Result<String, PromptError> {
        let pieces: Vec<&str> = self.text.split("{}").collect();
        if pieces.len() - 1 != values.len() {
            return Err(PromptError::SlotMismatch {
                name: self.name,
                expected: pieces.len() - 1,
                given: values.len(),
            });
        }
        let mut out = String::with_capacity(self.text.len() + values.iter().map(|v| v.len()).sum::<usize>());
        for (piece, value) in pieces.iter().zip(values) {
            out.push_str(piece);
            out.push_str(value);
        }
        out.push_str(pieces[pieces.len() - 1]);
        Ok(out)
    }
}

/// The full set of templates in use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<(PromptKind, PromptTemplate)>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: PromptKind::ALL
                .iter()
                .map(|&k| (k, PromptTemplate::new(k.file_name(), k.builtin())))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Built-in templates, each replaced by `dir/<file_name>` when present.
    pub fn load_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for (kind, template) in &mut set.templates {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| IoError::io(&path, e))?;
                *template = PromptTemplate::new(kind.file_name(), &text);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &PromptTemplate {
        &self
            .templates
            .iter()
            .find(|(k, _)| *k == kind)
            .expect("every kind is populated")
            .1
    }

    pub fn render(&self, kind: PromptKind, values: &[&str]) -> Result<String, PromptError> {
        self.get(kind).render(values)
    }
}

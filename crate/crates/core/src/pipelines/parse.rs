//! Lenient parsing of identifier and matching outputs.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use super::InsightQuery;

/// Rewrites Python-style literals into JSON: single-quoted strings,
/// `True`/`False`/`None`, and trailing commas.
fn jsonish(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' | '\'' => {
                let quote = c;
                let mut body = String::new();
                i += 1;
                while i < chars.len() && chars[i] != quote {
                    if chars[i] == '\\' && i + 1 < chars.len() {
                        body.push(chars[i]);
                        i += 1;
                    }
                    body.push(chars[i]);
                    i += 1;
                }
                if quote == '"' {
                    out.push('"');
                    out.push_str(&body);
                    out.push('"');
                } else {
                    let unescaped = body.replace("\\'", "'");
                    out.push_str(&serde_json::to_string(&unescaped).unwrap_or_default());
                }
                i += 1;
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(',');
                }
                i += 1;
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push_str(match word.as_str() {
                    "True" => "true",
                    "False" => "false",
                    "None" => "null",
                    other => other,
                });
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

fn parse_loose(text: &str) -> Option<Value> {
    serde_json::from_str(text)
        .ok()
        .or_else(|| serde_json::from_str(&jsonish(text)).ok())
}

fn key_ci<'a>(object: &'a serde_json::Map<String, Value>, wanted: &str) -> Option<&'a Value> {
    object
        .iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(wanted))
        .map(|(_, v)| v)
}

fn truthy(value: Option<&Value>) -> bool {
    match value {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) => matches!(s.trim().to_ascii_lowercase().as_str(), "true" | "yes"),
        Some(Value::Number(n)) => n.as_f64().is_some_and(|x| x != 0.0),
        _ => false,
    }
}

fn clean_fragment(text: &str) -> String {
    text.trim()
        .trim_matches(|c: char| c == '"' || c == '\'')
        .trim_end_matches(|c: char| matches!(c, '.' | '?' | '!') || c.is_whitespace())
        .trim()
        .to_string()
}

/// Parses the identifier's list of `{"Insight": ..., "Multi-answer": ...}`
/// dictionaries. Empty dictionaries are skipped; `None` means the output
/// does not contain a readable list.
pub fn parse_insights(raw: &str) -> Option<Vec<InsightQuery>> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    if end < start {
        return None;
    }
    let Value::Array(rows) = parse_loose(&raw[start..=end])? else {
        return None;
    };
    let mut insights = Vec::new();
    for row in rows {
        let Value::Object(object) = row else {
            return None;
        };
        if object.is_empty() {
            continue;
        }
        let Some(Value::String(text)) = key_ci(&object, "insight") else {
            continue;
        };
        let fragment = clean_fragment(text);
        if fragment.is_empty() {
            continue;
        }
        let multi_answer = truthy(key_ci(&object, "multi-answer").or_else(|| key_ci(&object, "multi_answer")));
        insights.push(InsightQuery { fragment, multi_answer });
    }
    Some(insights)
}

fn answer_word(text: &str) -> Option<&'static str> {
    let word = text
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some("Yes"),
        "no" => Some("No"),
        _ => None,
    }
}

/// Reads the `"answer"` of a matching reply as `"Yes"` or `"No"`.
pub fn parse_matching_answer(raw: &str) -> Option<&'static str> {
    if let (Some(start), Some(end)) = (raw.find('{'), raw.rfind('}')) {
        if start < end {
            if let Some(Value::Object(object)) = parse_loose(&raw[start..=end]) {
                if let Some(Value::String(answer)) = key_ci(&object, "answer") {
                    return answer_word(answer);
                }
            }
        }
    }
    static ANSWER: OnceLock<Regex> = OnceLock::new();
    let re = ANSWER.get_or_init(|| Regex::new(r#"(?i)["']?answer["']?\s*[:=]\s*["']?(yes|no)\b"#).expect("valid regex"));
    re.captures(raw).and_then(|c| answer_word(&c[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(fragment: &str, multi: bool) -> InsightQuery {
        InsightQuery {
            fragment: fragment.into(),
            multi_answer: multi,
        }
    }

    #[test]
    fn json_list_is_parsed() {
        let raw = r#"[{"Insight": "Paris is the capital of", "Multi-answer": false}]"#;
        assert_eq!(parse_insights(raw), Some(vec![q("Paris is the capital of", false)]));
    }

    #[test]
    fn python_literals_and_prose_are_tolerated() {
        let raw = "Sure! Here you go:\n[{'Insight': \"BERT is evaluated on.\", 'Multi-answer': True},]\nDone.";
        assert_eq!(parse_insights(raw), Some(vec![q("BERT is evaluated on", true)]));
    }

    #[test]
    fn empty_dictionaries_yield_nothing() {
        assert_eq!(parse_insights("[{}]"), Some(vec![]));
        assert_eq!(parse_insights("[]"), Some(vec![]));
    }

    #[test]
    fn unreadable_output_is_none() {
        assert_eq!(parse_insights("I cannot help with that."), None);
        assert_eq!(parse_insights("[not json at all"), None);
        assert_eq!(parse_insights("[1, 2]"), None);
    }

    #[test]
    fn apostrophes_inside_double_quotes_survive() {
        let raw = r#"[{"Insight": "the model's accuracy on", "Multi-answer": "False"}]"#;
        assert_eq!(parse_insights(raw), Some(vec![q("the model's accuracy on", false)]));
    }

    #[test]
    fn matching_answer_forms() {
        assert_eq!(parse_matching_answer(r#"{"explanation": "x", "answer": "Yes"}"#), Some("Yes"));
        assert_eq!(parse_matching_answer("```json\n{'explanation': 'x', 'answer': 'no'}\n```"), Some("No"));
        assert_eq!(parse_matching_answer(r#"answer: "YES" because"#), Some("Yes"));
        assert_eq!(parse_matching_answer(r#"{"answer": "maybe"}"#), None);
        assert_eq!(parse_matching_answer("no idea"), None);
    }
}

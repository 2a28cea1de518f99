//! Small text utilities shared across modules.

/// Collapses every run of whitespace into one space and trims the ends.
pub fn collapse_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases and collapses whitespace.
pub fn fold(text: &str) -> String {
    collapse_ws(&text.to_lowercase())
}

/// Whitespace token count, the token approximation used throughout.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max` whitespace tokens, joined by single spaces.
pub fn truncate_tokens(text: &str, max: usize) -> String {
    if token_count(text) <= max {
        return text.to_string();
    }
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

/// Case-insensitive, non-overlapping count of `needle` in `haystack`, with
/// whitespace collapsed on both sides. An empty needle counts zero.
pub fn count_occurrences(haystack: &str, needle: &str) -> usize {
    let needle = fold(needle);
    if needle.is_empty() {
        return 0;
    }
    fold(haystack).matches(needle.as_str()).count()
}

/// Case-insensitive substring test used for leak checks.
pub fn contains_folded(haystack: &str, needle: &str) -> bool {
    let needle = fold(needle);
    !needle.is_empty() && fold(haystack).contains(needle.as_str())
}

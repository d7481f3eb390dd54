//! Small text helpers shared across modules: whitespace token counting and
//! extraction of synthetic entity labels from observation text.

use regex::Regex;
use std::sync::OnceLock;

/// Counts whitespace-separated tokens. The default trajectory-length
/// tokenizer; absolute counts differ from any LLM tokenizer, so length-based
/// metrics are treated as ratios.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn entity_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bE\d+-[a-z]+\b").expect("entity label pattern"))
}

/// Extracts synthetic entity labels (`E<num>-<word>`) in order of first
/// occurrence, deduplicated.
pub fn extract_entity_labels(text: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for m in entity_regex().find_iter(text) {
        let label = m.as_str().to_string();
        if !seen.contains(&label) {
            seen.push(label);
        }
    }
    seen
}

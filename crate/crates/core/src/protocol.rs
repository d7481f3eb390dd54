//! Tag-delimited grammar for agent actions and environment observations.
//!
//! Agents emit `<think>…</think>` followed by exactly one of
//! `<search>…</search>` (queries separated by newlines) or
//! `<answer>…</answer>`. The environment replies with one
//! `<information>…</information>` section per executed query. Tag names are
//! byte-exact and case-sensitive; text outside recognized tags is ignored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on parallel queries accepted from a single search action.
/// Parsed query lists are deduplicated and truncated to this many entries.
pub const DEFAULT_MAX_QUERIES: usize = 5;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const SEARCH_OPEN: &str = "<search>";
const SEARCH_CLOSE: &str = "</search>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const INFO_OPEN: &str = "<information>";
const INFO_CLOSE: &str = "</information>";

/// Verbatim text emitted by an agent, possibly malformed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawActionText(pub String);

impl RawActionText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for RawActionText {
    fn from(text: &str) -> Self {
        Self(text.to_string())
    }
}

/// One parsed agent turn: a reasoning trace plus a search or an answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub think: String,
    pub body: ActionBody,
}

/// The actionable half of a turn. Exactly one of search or answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionBody {
    /// Parallel search queries, deduplicated, 1..=N_max entries.
    Search(Vec<String>),
    /// Terminal action carrying the final answer.
    Answer(String),
}

impl Action {
    pub fn is_search(&self) -> bool {
        matches!(self.body, ActionBody::Search(_))
    }

    pub fn is_answer(&self) -> bool {
        matches!(self.body, ActionBody::Answer(_))
    }

    pub fn queries(&self) -> &[String] {
        match &self.body {
            ActionBody::Search(qs) => qs,
            ActionBody::Answer(_) => &[],
        }
    }
}

/// Ordered (query, summary) pairs rendered back to the agent after a search
/// turn. Entries align one-to-one with the executed queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoBlock {
    pub entries: Vec<InfoEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoEntry {
    pub query: String,
    pub summary: String,
}

impl InfoBlock {
    pub fn new(entries: Vec<InfoEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Grammar violations. Each variant names the rule that was broken so the
/// rollout engine can send back a format-error observation.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ParseError {
    #[error("missing or empty <think> section")]
    MissingThink,
    #[error("missing <search> or <answer> section after </think>")]
    MissingBody,
    #[error("tag <{0}> appears more than once")]
    DuplicateTag(String),
    #[error("both <search> and <answer> present in one action")]
    BothSearchAndAnswer,
    #[error("<search> contains no non-empty query")]
    EmptyQueryList,
    #[error("no <information> sections found")]
    NoInformationTags,
    #[error("unbalanced <information> tags")]
    UnbalancedTags,
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

/// Extracts the content between the first `open` and the first `close` that
/// follows it. Returns the content and the byte offset just past `close`.
fn extract_span<'a>(text: &'a str, open: &str, close: &str) -> Option<(&'a str, usize)> {
    let start = text.find(open)? + open.len();
    let end_rel = text[start..].find(close)?;
    Some((&text[start..start + end_rel], start + end_rel + close.len()))
}

/// Parses an agent emission under the default query cap.
pub fn parse_action(raw: &RawActionText) -> Result<Action, ParseError> {
    parse_action_with_limit(raw, DEFAULT_MAX_QUERIES)
}

/// Parses an agent emission, keeping at most `max_queries` search queries.
///
/// The grammar requires exactly one `<think>…</think>` followed by exactly
/// one `<search>…</search>` or `<answer>…</answer>`. Queries are split on
/// newlines, trimmed, deduplicated in order, and truncated to the cap.
pub fn parse_action_with_limit(
    raw: &RawActionText,
    max_queries: usize,
) -> Result<Action, ParseError> {
    let text = raw.as_str();

    if count_occurrences(text, THINK_OPEN) > 1 {
        return Err(ParseError::DuplicateTag("think".to_string()));
    }
    let (think_raw, after_think) =
        extract_span(text, THINK_OPEN, THINK_CLOSE).ok_or(ParseError::MissingThink)?;
    let think = think_raw.trim();
    if think.is_empty() {
        return Err(ParseError::MissingThink);
    }

    let tail = &text[after_think..];
    let searches = count_occurrences(tail, SEARCH_OPEN);
    let answers = count_occurrences(tail, ANSWER_OPEN);

    if searches > 0 && answers > 0 {
        return Err(ParseError::BothSearchAndAnswer);
    }
    if searches > 1 {
        return Err(ParseError::DuplicateTag("search".to_string()));
    }
    if answers > 1 {
        return Err(ParseError::DuplicateTag("answer".to_string()));
    }

    if searches == 1 {
        let (body, _) =
            extract_span(tail, SEARCH_OPEN, SEARCH_CLOSE).ok_or(ParseError::MissingBody)?;
        let queries = split_queries(body, max_queries);
        if queries.is_empty() {
            return Err(ParseError::EmptyQueryList);
        }
        return Ok(Action {
            think: think.to_string(),
            body: ActionBody::Search(queries),
        });
    }
    if answers == 1 {
        let (body, _) =
            extract_span(tail, ANSWER_OPEN, ANSWER_CLOSE).ok_or(ParseError::MissingBody)?;
        return Ok(Action {
            think: think.to_string(),
            body: ActionBody::Answer(body.trim().to_string()),
        });
    }
    Err(ParseError::MissingBody)
}

/// Splits newline-separated queries, trims, drops empties, deduplicates
/// preserving first occurrence, and truncates to `cap`.
fn split_queries(body: &str, cap: usize) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for line in body.lines() {
        let q = line.trim();
        if q.is_empty() || seen.iter().any(|s| s == q) {
            continue;
        }
        seen.push(q.to_string());
        if seen.len() == cap {
            break;
        }
    }
    seen
}

/// Renders an action back into its wire form. Inverse of [`parse_action`]
/// for actions whose content carries no grammar tags.
pub fn render_action(action: &Action) -> String {
    match &action.body {
        ActionBody::Search(queries) => format!(
            "{}{}{}{}{}{}",
            THINK_OPEN,
            action.think,
            THINK_CLOSE,
            SEARCH_OPEN,
            queries.join("\n"),
            SEARCH_CLOSE
        ),
        ActionBody::Answer(answer) => format!(
            "{}{}{}{}{}{}",
            THINK_OPEN, action.think, THINK_CLOSE, ANSWER_OPEN, answer, ANSWER_CLOSE
        ),
    }
}

/// Renders one `<information>` section per entry, in entry order.
pub fn render_info(block: &InfoBlock) -> Result<String, ParseError> {
    if block.entries.is_empty() {
        return Err(ParseError::NoInformationTags);
    }
    let mut out = String::new();
    for entry in &block.entries {
        out.push_str(INFO_OPEN);
        out.push('\n');
        out.push_str("Query: ");
        out.push_str(&entry.query);
        out.push('\n');
        out.push_str(&entry.summary);
        out.push('\n');
        out.push_str(INFO_CLOSE);
        out.push('\n');
    }
    Ok(out)
}

/// Recovers the entries of every `<information>` section, in order. Content
/// between sections is ignored. A section without a `Query:` first line
/// yields an entry with an empty query and the whole content as summary.
pub fn parse_info(text: &str) -> Result<InfoBlock, ParseError> {
    let mut entries = Vec::new();
    let mut rest = text;
    loop {
        let Some(open_at) = rest.find(INFO_OPEN) else {
            break;
        };
        let content_start = open_at + INFO_OPEN.len();
        let Some(close_rel) = rest[content_start..].find(INFO_CLOSE) else {
            return Err(ParseError::UnbalancedTags);
        };
        let content = rest[content_start..content_start + close_rel].trim();
        entries.push(parse_info_section(content));
        rest = &rest[content_start + close_rel + INFO_CLOSE.len()..];
    }
    if rest.contains(INFO_CLOSE) {
        return Err(ParseError::UnbalancedTags);
    }
    if entries.is_empty() {
        return Err(ParseError::NoInformationTags);
    }
    Ok(InfoBlock { entries })
}

fn parse_info_section(content: &str) -> InfoEntry {
    if let Some(first_line_end) = content.find('\n') {
        let (first, remainder) = content.split_at(first_line_end);
        if let Some(query) = first.strip_prefix("Query:") {
            return InfoEntry {
                query: query.trim().to_string(),
                summary: remainder.trim_start_matches('\n').trim().to_string(),
            };
        }
    } else if let Some(query) = content.strip_prefix("Query:") {
        return InfoEntry {
            query: query.trim().to_string(),
            summary: String::new(),
        };
    }
    InfoEntry {
        query: String::new(),
        summary: content.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(s: &str) -> RawActionText {
        RawActionText::new(s)
    }

    #[test]
    fn parses_search_action() {
        let a = parse_action(&raw(
            "<think>plan</think><search>who won 1941 Epsom Derby</search>",
        ))
        .unwrap();
        assert_eq!(a.think, "plan");
        assert_eq!(
            a.body,
            ActionBody::Search(vec!["who won 1941 Epsom Derby".to_string()])
        );
    }

    #[test]
    fn parses_answer_action() {
        let a = parse_action(&raw("<think>done</think><answer>Sensation novel</answer>")).unwrap();
        assert_eq!(a.think, "done");
        assert_eq!(a.body, ActionBody::Answer("Sensation novel".to_string()));
    }

    #[test]
    fn think_without_body_is_missing_body() {
        assert_eq!(
            parse_action(&raw("<think>x</think>")),
            Err(ParseError::MissingBody)
        );
    }

    #[test]
    fn missing_think_variants() {
        assert_eq!(
            parse_action(&raw("<search>q</search>")),
            Err(ParseError::MissingThink)
        );
        assert_eq!(
            parse_action(&raw("<think>   </think><search>q</search>")),
            Err(ParseError::MissingThink)
        );
        assert_eq!(
            parse_action(&raw("<think>unclosed <search>q</search>")),
            Err(ParseError::MissingThink)
        );
    }

    #[test]
    fn duplicate_and_mixed_tags() {
        assert_eq!(
            parse_action(&raw("<think>a</think><think>b</think><search>q</search>")),
            Err(ParseError::DuplicateTag("think".to_string()))
        );
        assert_eq!(
            parse_action(&raw(
                "<think>a</think><search>q</search><search>r</search>"
            )),
            Err(ParseError::DuplicateTag("search".to_string()))
        );
        assert_eq!(
            parse_action(&raw("<think>a</think><search>q</search><answer>x</answer>")),
            Err(ParseError::BothSearchAndAnswer)
        );
    }

    #[test]
    fn empty_query_list_rejected() {
        assert_eq!(
            parse_action(&raw("<think>a</think><search>\n  \n</search>")),
            Err(ParseError::EmptyQueryList)
        );
    }

    #[test]
    fn queries_deduplicated_in_order_and_capped() {
        let a = parse_action(&raw("<think>t</think><search>b\na\nb\nc\na</search>")).unwrap();
        assert_eq!(
            a.queries(),
            &["b".to_string(), "a".to_string(), "c".to_string()]
        );

        let many = (0..9).map(|i| format!("q{i}")).collect::<Vec<_>>().join("\n");
        let a = parse_action(&raw(&format!("<think>t</think><search>{many}</search>"))).unwrap();
        assert_eq!(a.queries().len(), DEFAULT_MAX_QUERIES);
        assert_eq!(a.queries()[0], "q0");
    }

    #[test]
    fn content_outside_tags_ignored() {
        let a = parse_action(&raw(
            "noise <think>t</think> chatter <answer>42</answer> trailing",
        ))
        .unwrap();
        assert_eq!(a.body, ActionBody::Answer("42".to_string()));
    }

    #[test]
    fn render_info_single_entry() {
        let block = InfoBlock::new(vec![InfoEntry {
            query: "q1".to_string(),
            summary: "s1".to_string(),
        }]);
        let text = render_info(&block).unwrap();
        assert_eq!(text.matches("<information>").count(), 1);
        assert_eq!(parse_info(&text).unwrap(), block);
    }

    #[test]
    fn render_info_preserves_entry_order() {
        let block = InfoBlock::new(vec![
            InfoEntry {
                query: "first".to_string(),
                summary: "alpha".to_string(),
            },
            InfoEntry {
                query: "second".to_string(),
                summary: "beta".to_string(),
            },
        ]);
        let text = render_info(&block).unwrap();
        // Independent recount: enumerate section starts and check order.
        let sections: Vec<usize> = text.match_indices("<information>").map(|(i, _)| i).collect();
        assert_eq!(sections.len(), 2);
        let first_at = text.find("first").unwrap();
        let second_at = text.find("second").unwrap();
        assert!(sections[0] < first_at && first_at < sections[1]);
        assert!(sections[1] < second_at);
        assert_eq!(parse_info(&text).unwrap(), block);
    }

    #[test]
    fn render_info_rejects_empty_block() {
        assert_eq!(
            render_info(&InfoBlock::new(vec![])),
            Err(ParseError::NoInformationTags)
        );
    }

    #[test]
    fn info_without_query_marker_keeps_summary() {
        let parsed = parse_info("<information>only summary, no query marker</information>").unwrap();
        assert_eq!(parsed.entries.len(), 1);
        assert_eq!(parsed.entries[0].query, "");
        assert_eq!(parsed.entries[0].summary, "only summary, no query marker");
    }

    #[test]
    fn parse_info_counts_sections() {
        let text = "\
<information>\nQuery: a\nsa\n</information>\n\
filler\n\
<information>\nQuery: b\nsb\n</information>\n\
<information>\nQuery: c\nsc\n</information>";
        // Independent count of sections in the input.
        assert_eq!(text.matches("<information>").count(), 3);
        let block = parse_info(text).unwrap();
        assert_eq!(block.len(), 3);
        assert_eq!(block.entries[2].query, "c");
    }

    #[test]
    fn parse_info_error_cases() {
        assert_eq!(parse_info("no tags here"), Err(ParseError::NoInformationTags));
        assert_eq!(
            parse_info("<information>open only"),
            Err(ParseError::UnbalancedTags)
        );
        assert_eq!(
            parse_info("</information> close only"),
            Err(ParseError::UnbalancedTags)
        );
    }

    #[test]
    fn action_round_trip() {
        let actions = vec![
            Action {
                think: "look up the winner".to_string(),
                body: ActionBody::Search(vec![
                    "horse that won the 1941 Epsom Derby".to_string(),
                    "1941 Epsom Derby winner".to_string(),
                ]),
            },
            Action {
                think: "done".to_string(),
                body: ActionBody::Answer("Sensation novel".to_string()),
            },
        ];
        for a in actions {
            let parsed = parse_action(&RawActionText::new(render_action(&a))).unwrap();
            assert_eq!(parsed, a);
        }
    }
}

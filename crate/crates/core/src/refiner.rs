//! Evidence condensers. A refiner turns the noisy hits for one query into a
//! single bounded summary the researcher reads instead of raw snippets.
//!
//! Four interchangeable implementations:
//! - [`TruncatingRefiner`] — concatenates top-hit snippets and cuts at the cap;
//! - [`OracleRefiner`] — keeps only the snippets with maximal token overlap
//!   against the query (the stand-in for a trained refiner model);
//! - [`RemoteRefiner`] — sends the refinement request to a chat endpoint and
//!   parses the `<information>` wrapper back;
//! - [`InlineRefiner`] — passes raw snippets through uncapped (the
//!   no-refiner ablation).

use crate::gateway::{ChatClient, ChatMessage, GatewayError};
use crate::protocol;
use crate::retrieval::Evidence;
use crate::rollout::Trajectory;
use crate::text::whitespace_tokens;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard bound on summary length, in characters.
pub const DEFAULT_SUMMARY_CAP: usize = 400;

/// Mandated reply when a query retrieves nothing useful.
pub const INSUFFICIENT_INFO: &str =
    "The provided sources are insufficient for this query; further investigation with a \
reformulated query may be needed.";

#[derive(Debug, Clone, Error)]
pub enum RefineError {
    #[error("remote refiner unavailable: {0}")]
    RemoteUnavailable(String),
}

/// Inputs to one refinement call: the task question for orientation, the
/// query that produced the evidence, and the evidence itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub original_question: String,
    pub current_query: String,
    pub evidence: Evidence,
}

/// Bounded condensation of one query's evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub source_doc_ids: Vec<String>,
}

/// Interface contract shared by all refiner implementations. Refiners must
/// be callable from parallel per-query refinement within one turn.
pub trait Refiner: Send + Sync {
    fn refine(&self, request: &RefineRequest) -> Result<Summary, RefineError>;
    fn name(&self) -> &'static str;
}

fn insufficiency() -> Summary {
    Summary {
        text: INSUFFICIENT_INFO.to_string(),
        source_doc_ids: Vec::new(),
    }
}

/// Joins parts with single spaces, cutting at `cap` characters. Returns the
/// text and the ids of parts that contributed at least one character.
fn join_capped(parts: &[(String, String)], cap: usize) -> (String, Vec<String>) {
    let mut text = String::new();
    let mut used = Vec::new();
    let mut chars = 0usize;
    for (id, part) in parts {
        if chars >= cap {
            break;
        }
        let mut contributed = false;
        if !text.is_empty() {
            text.push(' ');
            chars += 1;
        }
        for c in part.chars() {
            if chars >= cap {
                break;
            }
            text.push(c);
            chars += 1;
            contributed = true;
        }
        if contributed {
            used.push(id.clone());
        }
    }
    (text, used)
}

/// Concatenates top-hit snippets in rank order and truncates at the cap.
#[derive(Debug, Clone)]
pub struct TruncatingRefiner {
    pub cap: usize,
}

impl Default for TruncatingRefiner {
    fn default() -> Self {
        Self {
            cap: DEFAULT_SUMMARY_CAP,
        }
    }
}

impl Refiner for TruncatingRefiner {
    fn refine(&self, request: &RefineRequest) -> Result<Summary, RefineError> {
        if request.evidence.is_empty() {
            return Ok(insufficiency());
        }
        let parts: Vec<(String, String)> = request
            .evidence
            .hits
            .iter()
            .map(|h| (h.doc_id.clone(), h.snippet.clone()))
            .collect();
        let (text, source_doc_ids) = join_capped(&parts, self.cap);
        Ok(Summary {
            text,
            source_doc_ids,
        })
    }

    fn name(&self) -> &'static str {
        "truncating"
    }
}

/// Keeps only the hit snippets whose distinct-token overlap with the query
/// is maximal, in rank order, capped. Every kept snippet is verbatim source
/// text, so the summary stays faithful to the corpus.
#[derive(Debug, Clone)]
pub struct OracleRefiner {
    pub cap: usize,
}

impl Default for OracleRefiner {
    fn default() -> Self {
        Self {
            cap: DEFAULT_SUMMARY_CAP,
        }
    }
}

fn overlap(query_terms: &[String], snippet: &str) -> usize {
    let snippet_terms = crate::retrieval::tokenize(snippet);
    query_terms
        .iter()
        .filter(|t| snippet_terms.contains(t))
        .count()
}

impl Refiner for OracleRefiner {
    fn refine(&self, request: &RefineRequest) -> Result<Summary, RefineError> {
        if request.evidence.is_empty() {
            return Ok(insufficiency());
        }
        let mut query_terms = crate::retrieval::tokenize(&request.current_query);
        query_terms.sort();
        query_terms.dedup();

        let overlaps: Vec<usize> = request
            .evidence
            .hits
            .iter()
            .map(|h| overlap(&query_terms, &h.snippet))
            .collect();
        let best = overlaps.iter().copied().max().unwrap_or(0);
        if best == 0 {
            return Ok(insufficiency());
        }
        let parts: Vec<(String, String)> = request
            .evidence
            .hits
            .iter()
            .zip(&overlaps)
            .filter(|(_, &o)| o == best)
            .map(|(h, _)| (h.doc_id.clone(), h.snippet.clone()))
            .collect();
        let (text, source_doc_ids) = join_capped(&parts, self.cap);
        Ok(Summary {
            text,
            source_doc_ids,
        })
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// Passes every snippet through unbounded. Used by the no-refiner ablation
/// so the researcher sees exactly what retrieval returned.
#[derive(Debug, Clone, Default)]
pub struct InlineRefiner;

impl Refiner for InlineRefiner {
    fn refine(&self, request: &RefineRequest) -> Result<Summary, RefineError> {
        if request.evidence.is_empty() {
            return Ok(insufficiency());
        }
        let text = request
            .evidence
            .hits
            .iter()
            .map(|h| h.snippet.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Summary {
            text,
            source_doc_ids: request.evidence.hits.iter().map(|h| h.doc_id.clone()).collect(),
        })
    }

    fn name(&self) -> &'static str {
        "inline"
    }
}

/// Delegates condensation to a chat endpoint and parses the
/// `<information>` wrapper from its reply.
pub struct RemoteRefiner {
    client: ChatClient,
    pub cap: usize,
}

impl RemoteRefiner {
    pub fn new(client: ChatClient) -> Self {
        Self {
            client,
            cap: DEFAULT_SUMMARY_CAP,
        }
    }

    fn build_message(request: &RefineRequest) -> ChatMessage {
        let documents = request
            .evidence
            .hits
            .iter()
            .enumerate()
            .map(|(i, h)| format!("[{}] {}", i + 1, h.snippet))
            .collect::<Vec<_>>()
            .join("\n");
        ChatMessage::user(format!(
            "TASK: Synthesize from the retrieved documents the information relevant to the \
current query, in service of the original question. Merge overlapping facts, do not answer \
the question directly, and if the documents are not relevant state that the provided sources \
are insufficient. Wrap the entire output in <information> and </information> tags and add no \
other text.\n\n\
- ORIGINAL QUESTION: {}\n\
- CURRENT QUERY: {}\n\
- RETRIEVED DOCUMENTS:\n{}",
            request.original_question, request.current_query, documents
        ))
    }
}

impl Refiner for RemoteRefiner {
    fn refine(&self, request: &RefineRequest) -> Result<Summary, RefineError> {
        if request.evidence.is_empty() {
            return Ok(insufficiency());
        }
        let reply = self
            .client
            .complete(&[Self::build_message(request)])
            .map_err(|e: GatewayError| RefineError::RemoteUnavailable(e.to_string()))?;
        let block = protocol::parse_info(&reply)
            .map_err(|e| RefineError::RemoteUnavailable(format!("bad wrapper: {e}")))?;
        let text: String = block
            .entries
            .iter()
            .map(|e| e.summary.as_str())
            .collect::<Vec<_>>()
            .join(" ")
            .chars()
            .take(self.cap)
            .collect();
        Ok(Summary {
            text,
            source_doc_ids: request.evidence.hits.iter().map(|h| h.doc_id.clone()).collect(),
        })
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

/// Researcher-visible tokens over the tokens the researcher would have seen
/// with raw snippets inlined instead of summaries. Capped at 1 (a summary
/// longer than its raw evidence means no compression, not expansion of the
/// metric).
pub fn compression_ratio(trajectory: &Trajectory) -> f64 {
    let visible = trajectory.length_tokens as f64;
    let summary_tokens: usize = trajectory
        .steps
        .iter()
        .filter_map(|s| s.info.as_ref())
        .flat_map(|b| b.entries.iter())
        .map(|e| whitespace_tokens(&e.summary))
        .sum();
    let counterfactual =
        visible - summary_tokens as f64 + trajectory.raw_evidence_tokens as f64;
    if counterfactual <= 0.0 {
        return 1.0;
    }
    (visible / counterfactual).min(1.0)
}

//! BM25 lexical search over a task corpus — the environment half of the
//! transition function.
//!
//! Scoring contract, pinned for reproducibility:
//! - tokenization: lowercase, split on non-alphanumeric, no stemming or
//!   stopwords;
//! - BM25 with `k1 = 1.2`, `b = 0.75`;
//! - IDF is the +0.5 smoothed log form `ln((N - df + 0.5) / (df + 0.5))`,
//!   clamped at 0 so scores stay non-negative;
//! - duplicate query terms contribute once;
//! - candidates are documents sharing at least one term with the query;
//!   results sort by score descending, ties broken by ascending doc id.

use crate::taskgen::Document;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
/// Snippet length in characters taken from the start of a document body.
pub const SNIPPET_CHARS: usize = 240;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndexError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate document id: {0}")]
    DuplicateDocId(String),
}

/// Immutable inverted index over a document corpus.
#[derive(Debug, Clone)]
pub struct Index {
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    doc_ids: Vec<String>,
    snippets: Vec<String>,
}

/// Ranked result of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub query: String,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
    pub snippet: String,
}

impl Evidence {
    pub fn empty(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            hits: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Lowercases and splits on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn snippet_of(text: &str) -> String {
    text.chars().take(SNIPPET_CHARS).collect()
}

/// Builds the index. Deterministic; documents keep corpus order internally.
pub fn build_index(corpus: &[Document]) -> Result<Index, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut snippets = Vec::with_capacity(corpus.len());

    for (pos, doc) in corpus.iter().enumerate() {
        if doc_ids.contains(&doc.id) {
            return Err(IndexError::DuplicateDocId(doc.id.clone()));
        }
        let tokens = tokenize(&doc.text);
        doc_lengths.push(tokens.len());
        doc_ids.push(doc.id.clone());
        snippets.push(snippet_of(&doc.text));

        let mut counts: HashMap<String, u32> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push((pos, tf));
        }
    }
    let total: usize = doc_lengths.iter().sum();
    let avg_doc_length = total as f64 / doc_lengths.len() as f64;
    Ok(Index {
        postings,
        doc_lengths,
        avg_doc_length,
        doc_ids,
        snippets,
    })
}

impl Index {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    /// Document frequency of a raw term (tokenized form).
    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings
            .get(&term.to_lowercase())
            .map_or(0, |p| p.len())
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (((n - df + 0.5) / (df + 0.5)).ln()).max(0.0)
    }
}

/// BM25 search. Empty queries and queries with no matching terms yield an
/// empty `Evidence`, never an error.
pub fn search(index: &Index, query: &str, top_k: usize) -> Evidence {
    let mut terms = tokenize(query);
    terms.sort();
    terms.dedup();

    let mut scores: HashMap<usize, f64> = HashMap::new();
    for term in &terms {
        let Some(postings) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(postings.len());
        for &(pos, tf) in postings {
            let tf = tf as f64;
            let dl = index.doc_lengths[pos] as f64;
            let norm = tf * (BM25_K1 + 1.0)
                / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / index.avg_doc_length));
            *scores.entry(pos).or_insert(0.0) += idf * norm;
        }
    }

    let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.doc_ids[a.0].cmp(&index.doc_ids[b.0]))
    });
    ranked.truncate(top_k);

    Evidence {
        query: query.to_string(),
        hits: ranked
            .into_iter()
            .map(|(pos, score)| Hit {
                doc_id: index.doc_ids[pos].clone(),
                score,
                snippet: index.snippets[pos].clone(),
            })
            .collect(),
    }
}

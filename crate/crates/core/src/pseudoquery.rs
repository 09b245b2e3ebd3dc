//! Pseudo-query generation from object detections, seed-concept selection,
//! vocabulary construction, and inference-time query simplification.

use crate::error::{Error, Result};
use crate::proposal::MomentSpan;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// One detected object in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub frame_index: usize,
    pub label: String,
    pub confidence: f64,
}

/// Ordered object tokens generated for a candidate span (score-descending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuery {
    pub tokens: Vec<String>,
    pub span: MomentSpan,
}

/// Token-to-id mapping with reserved PAD and UNK entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const RESERVED: usize = 2;

impl Vocabulary {
    /// Builds a vocabulary over the distinct tokens, ordered alphabetically
    /// after the reserved PAD and UNK ids.
    pub fn build<I: IntoIterator<Item = S>, S: AsRef<str>>(tokens: I) -> Self {
        let set: BTreeSet<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        Vocabulary { tokens: set.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
            .map(|i| (i + RESERVED) as u32)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of(token).is_some()
    }

    /// Maps tokens to ids, falling back to UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_of(t).unwrap_or(UNK_ID)).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Scores each label by its maximum confidence over detections whose frame
/// center falls inside `span`, then keeps the top `k` labels
/// (score-descending, ties alphabetical).
pub fn top_k_objects(
    detections: &[Detection],
    span: MomentSpan,
    k: usize,
    t: usize,
) -> Result<PseudoQuery> {
    if k == 0 {
        return Err(Error::contract("top_k_objects requires k >= 1"));
    }
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for d in detections {
        if d.frame_index >= t || !span.covers_frame(d.frame_index, t) {
            continue;
        }
        let entry = best.entry(d.label.as_str()).or_insert(f64::NEG_INFINITY);
        if d.confidence > *entry {
            *entry = d.confidence;
        }
    }
    if best.is_empty() {
        return Err(Error::EmptyQuery(span.start(), span.end()));
    }
    let mut scored: Vec<(&str, f64)> = best.into_iter().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    scored.truncate(k);
    Ok(PseudoQuery { tokens: scored.into_iter().map(|(l, _)| l.to_string()).collect(), span })
}

/// The `n` most frequent tokens across all pseudo-queries (count-descending,
/// ties alphabetical). Returns every distinct token when fewer exist.
pub fn select_seed_concepts(queries: &[PseudoQuery], n: usize) -> Result<Vec<String>> {
    if queries.is_empty() {
        return Err(Error::contract("seed selection requires a non-empty query corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for q in queries {
        for tok in &q.tokens {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(n);
    Ok(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// Reduces a natural-language query to known noun tokens: lowercase, strip
/// punctuation, keep lexicon members (first occurrence), truncate to `k`.
pub fn simplify_query(text: &str, noun_lexicon: &BTreeSet<String>, k: usize) -> Vec<String> {
    let mut kept = Vec::new();
    let mut seen = BTreeSet::new();
    for raw in text.split_whitespace() {
        let token: String = raw
            .chars()
            .filter(|c| !c.is_ascii_punctuation() || *c == '_')
            .flat_map(|c| c.to_lowercase())
            .collect();
        if token.is_empty() || !noun_lexicon.contains(&token) {
            continue;
        }
        if seen.insert(token.clone()) {
            kept.push(token);
            if kept.len() == k {
                break;
            }
        }
    }
    kept
}

//! Exact cosine-similarity top-k search over pool embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::EmbeddingVector;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm embedding")]
    ZeroVector,
}

/// Embeddings of the searchable records, keyed by record id.
pub type EmbeddingIndex = BTreeMap<String, EmbeddingVector>;

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    // `+ 0.0` folds -0.0 into 0.0 so equal scores compare equal
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) + 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExperience {
    pub record_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub query_id: String,
    /// Similarity descending, ties by record id ascending.
    pub entries: Vec<ScoredExperience>,
    pub k_requested: usize,
}

impl RetrievedSet {
    pub fn empty(query_id: impl Into<String>, k_requested: usize) -> Self {
        Self {
            query_id: query_id.into(),
            entries: Vec::new(),
            k_requested,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.record_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ranking order: higher similarity first, then lexicographically smaller id.
pub fn rank_order(a: &ScoredExperience, b: &ScoredExperience) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.record_id.cmp(&b.record_id))
}

/// The `k` records most similar to `query`. The query's own id and every id
/// in `exclude` are skipped. Asking for more than are available returns all
/// candidates.
pub fn top_k(
    query_id: &str,
    query: &EmbeddingVector,
    pool: &EmbeddingIndex,
    k: usize,
    exclude: &BTreeSet<String>,
) -> Result<RetrievedSet, RetrievalError> {
    let mut scored = Vec::with_capacity(pool.len());
    for (id, emb) in pool {
        if id == query_id || exclude.contains(id) {
            continue;
        }
        scored.push(ScoredExperience {
            record_id: id.clone(),
            similarity: cosine_similarity(query, emb)?,
        });
    }
    if k > scored.len() {
        log::warn!(
            "query {query_id}: k={k} exceeds the {} searchable records; returning all",
            scored.len()
        );
    }
    if k == 0 {
        scored.clear();
    } else if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(RetrievedSet {
        query_id: query_id.to_string(),
        entries: scored,
        k_requested: k,
    })
}

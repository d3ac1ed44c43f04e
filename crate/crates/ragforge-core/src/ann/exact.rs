//! Brute-force inner-product search.

use crate::encoder::EmbeddingMatrix;

use super::{dot, Scored, SearchResult};

/// Scans every row; exact by construction. Serves as the oracle the HNSW
/// index is validated against and as the index for small or test-mode runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExactIndex;

impl ExactIndex {
    /// Callers (the snapshot wrapper) have already validated `k` and shapes.
    pub(crate) fn search(&self, emb: &EmbeddingMatrix, query: &[f64], k: usize) -> SearchResult {
        let mut scored: Vec<Scored> = (0..emb.n_rows())
            .map(|i| Scored {
                score: dot(emb.row(i), query),
                id: i as u32,
            })
            .collect();
        scored.sort_unstable_by(|a, b| b.cmp(a));
        scored.truncate(k);
        SearchResult {
            ids: scored.iter().map(|s| s.id as usize).collect(),
            scores: scored.iter().map(|s| s.score).collect(),
        }
    }
}

//! Inner-product nearest-neighbor indexes over passage embeddings.
//!
//! Two structures share one search contract: [`ExactIndex`] scans every row
//! and is the correctness oracle; [`HnswIndex`] is the navigable small-world
//! graph used at scale. Both return results ordered by descending score with
//! ties broken by ascending passage id, and both are deterministic given
//! their inputs (the HNSW level draws come from a seeded generator).
//!
//! An [`IndexSnapshot`] bundles the structure with the embedding matrix it
//! was built over; the embedding matrix carries the version and the
//! parameter hash that produced it, so a snapshot is self-describing about
//! its provenance.

mod exact;
mod hnsw;
mod storage;

pub use exact::ExactIndex;
pub use hnsw::{HnswConfig, HnswIndex};
pub use storage::{load_snapshot, save_snapshot};

use serde::{Deserialize, Serialize};

use crate::corpus::PassageId;
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Top-k search output: parallel id and score arrays, ordered by
/// descending score with ties broken by ascending passage id.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub ids: Vec<PassageId>,
    pub scores: Vec<f64>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Which structure a snapshot uses for search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Exact,
    Hnsw,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexStructure {
    Exact(ExactIndex),
    Hnsw(HnswIndex),
}

/// An immutable, searchable index generation: embeddings plus structure.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSnapshot {
    pub embeddings: EmbeddingMatrix,
    pub structure: IndexStructure,
}

impl IndexSnapshot {
    pub fn build_exact(embeddings: EmbeddingMatrix) -> Self {
        IndexSnapshot {
            structure: IndexStructure::Exact(ExactIndex),
            embeddings,
        }
    }

    pub fn build_hnsw(embeddings: EmbeddingMatrix, config: &HnswConfig) -> Self {
        let graph = HnswIndex::build(&embeddings, config);
        IndexSnapshot {
            structure: IndexStructure::Hnsw(graph),
            embeddings,
        }
    }

    pub fn build(embeddings: EmbeddingMatrix, kind: IndexKind, hnsw: &HnswConfig) -> Self {
        match kind {
            IndexKind::Exact => Self::build_exact(embeddings),
            IndexKind::Hnsw => Self::build_hnsw(embeddings, hnsw),
        }
    }

    pub fn kind(&self) -> IndexKind {
        match self.structure {
            IndexStructure::Exact(_) => IndexKind::Exact,
            IndexStructure::Hnsw(_) => IndexKind::Hnsw,
        }
    }

    pub fn version(&self) -> u64 {
        self.embeddings.version
    }

    pub fn len(&self) -> usize {
        self.embeddings.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim
    }

    /// Hash of the passage-tower parameters the embeddings were computed with.
    pub fn params_hash(&self) -> &str {
        &self.embeddings.params_hash
    }

    /// Top-k by inner product. `k` must satisfy `1 ≤ k ≤ len`.
    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 || k > self.len() {
            return Err(Error::KOutOfRange { k, len: self.len() });
        }
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "search query".into(),
                expected: format!("dim {}", self.dim()),
                actual: format!("dim {}", query.len()),
            });
        }
        match &self.structure {
            IndexStructure::Exact(ex) => Ok(ex.search(&self.embeddings, query, k)),
            IndexStructure::Hnsw(graph) => Ok(graph.search(&self.embeddings, query, k)),
        }
    }
}

/// Ordering key used across both indexes: higher score wins, equal scores
/// prefer the lower id. Scores are finite by construction.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Scored {
    pub score: f64,
    pub id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.score.to_bits() == other.score.to_bits() && self.id == other.id
    }
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::encoder::EmbeddingMatrix;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random unit vectors as an embedding matrix.
    pub fn random_unit_embeddings(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            data.extend(row);
        }
        EmbeddingMatrix::from_rows(0, dim, "test".into(), data).unwrap()
    }

    pub fn random_query(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        q.iter_mut().for_each(|v| *v /= norm);
        q
    }

    /// Brute-force top-k oracle, written directly against the tie rule:
    /// argsort by (score desc, id asc). Kept independent of the index
    /// implementations on purpose.
    pub fn argsort_topk(emb: &EmbeddingMatrix, query: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = (0..emb.n_rows())
            .map(|i| {
                let row = emb.row(i);
                (i, row.iter().zip(query).map(|(a, b)| a * b).sum())
            })
            .collect();
        scored.sort_by(|(ia, sa), (ib, sb)| {
            sb.partial_cmp(sa).unwrap().then_with(|| ia.cmp(ib))
        });
        scored.into_iter().take(k).map(|(i, _)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn exact_matches_argsort_oracle_with_ties() {
        // Duplicate rows force score ties; ascending id must win.
        let mut data = Vec::new();
        let rows = [
            [1.0, 0.0],
            [0.5, 0.5],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.5, 0.5],
        ];
        for r in rows {
            data.extend(r);
        }
        let emb = EmbeddingMatrix::from_rows(0, 2, "t".into(), data).unwrap();
        let snap = IndexSnapshot::build_exact(emb);
        let res = snap.search(&[1.0, 0.0], 5).unwrap();
        assert_eq!(res.ids, vec![0, 2, 1, 4, 3]);
        let oracle = argsort_topk(&snap.embeddings, &[1.0, 0.0], 5);
        assert_eq!(res.ids, oracle);
        assert!(res.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn exact_matches_argsort_on_random_vectors() {
        let emb = random_unit_embeddings(200, 8, 11);
        let snap = IndexSnapshot::build_exact(emb);
        for qs in 0..20 {
            let q = random_query(8, 1000 + qs);
            for k in [1, 5, 20] {
                let res = snap.search(&q, k).unwrap();
                let oracle = argsort_topk(&snap.embeddings, &q, k);
                assert_eq!(res.ids, oracle, "k={k} seed={qs}");
            }
        }
    }

    #[test]
    fn k_bounds_are_enforced() {
        let emb = random_unit_embeddings(10, 4, 1);
        let snap = IndexSnapshot::build_exact(emb);
        assert!(matches!(
            snap.search(&[0.0; 4], 0),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(matches!(
            snap.search(&[0.0; 4], 11),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(snap.search(&[0.0; 4], 10).is_ok());
        assert!(matches!(
            snap.search(&[0.0; 3], 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_index_search_fails() {
        let emb = EmbeddingMatrix::from_rows(0, 4, "t".into(), vec![]).unwrap();
        let snap = IndexSnapshot::build_exact(emb);
        assert!(matches!(snap.search(&[0.0; 4], 1), Err(Error::EmptyIndex)));
    }

    #[test]
    fn scored_ordering_prefers_high_score_then_low_id() {
        let a = Scored { score: 1.0, id: 4 };
        let b = Scored { score: 2.0, id: 9 };
        let c = Scored { score: 2.0, id: 3 };
        assert!(b > a);
        assert!(c > b);
        let mut v = [a, b, c];
        v.sort();
        assert_eq!(v.map(|s| s.id), [4, 9, 3]);
    }
}

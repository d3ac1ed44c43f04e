//! Retrieval: candidate selection from the index, fresh re-scoring, and
//! document probabilities.
//!
//! Candidates come out of the (possibly stale) index snapshot, but the
//! scores that feed training are recomputed from the current parameters:
//! the query is re-encoded through `W_q` and every candidate passage through
//! `W_p`, so gradients flow into both towers regardless of how old the index
//! is. The index affects *which* passages are candidates, never how they are
//! weighted.

mod bm25;

pub use bm25::{Bm25Index, Bm25Params};

use serde::{Deserialize, Serialize};

use crate::ann::IndexSnapshot;
use crate::corpus::{KnowledgeBase, PassageId};
use crate::encoder::{similarity, EncoderParams};
use crate::error::{Error, Result};
use crate::util::{contains_subsequence, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    /// Passages retrieved per query.
    pub k: usize,
    /// Softmax temperature over fresh scores.
    pub tau: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig { k: 5, tau: 1.0 }
    }
}

/// Top-k retrieval output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    /// Candidate passages in index order (descending stale score).
    pub candidate_ids: Vec<PassageId>,
    /// Scores the index snapshot assigned (stale parameters).
    pub stale_scores: Vec<f64>,
    /// Inner products under the current parameters.
    pub fresh_scores: Vec<f64>,
    /// `softmax(fresh_scores / tau)`.
    pub doc_probs: Vec<f64>,
    /// Generation of the snapshot the candidates came from.
    pub index_version: u64,
}

impl RetrievedSet {
    pub fn k(&self) -> usize {
        self.candidate_ids.len()
    }
}

/// Retrieves `config.k` candidates for `query_tokens` and re-scores them
/// with the current parameters.
pub fn retrieve(
    query_tokens: &[String],
    kb: &KnowledgeBase,
    index: &IndexSnapshot,
    params: &EncoderParams,
    config: &RetrieverConfig,
) -> Result<RetrievedSet> {
    if query_tokens.is_empty() {
        return Err(Error::Other("retrieve with empty query tokens".into()));
    }
    if config.tau <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {}",
            config.tau
        )));
    }
    let q_vec = params.encode_question(query_tokens);
    let hit = index.search(&q_vec, config.k)?;
    let mut fresh_scores = Vec::with_capacity(hit.ids.len());
    for &id in &hit.ids {
        let p_vec = params.encode_passage(kb.passage(id)?);
        fresh_scores.push(similarity(&q_vec, &p_vec));
    }
    let scaled: Vec<f64> = fresh_scores.iter().map(|s| s / config.tau).collect();
    let doc_probs = softmax(&scaled);
    Ok(RetrievedSet {
        candidate_ids: hit.ids,
        stale_scores: hit.scores,
        fresh_scores,
        doc_probs,
        index_version: index.version(),
    })
}

/// BM25-mined hard negatives: lexically close passages that do not contain
/// the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    pub ids: Vec<PassageId>,
    /// False when fewer than the requested count survived the answer filter.
    pub complete: bool,
}

/// Ranks passages by BM25 against the question and keeps the best `n` whose
/// title+body tokens do not contain `answer_tokens` as a contiguous
/// subsequence. The gold passage is excluded by that same filter whenever it
/// actually contains the answer.
pub fn mine_hard_negatives(
    question_tokens: &[String],
    answer_tokens: &[String],
    kb: &KnowledgeBase,
    bm25: &Bm25Index,
    n: usize,
) -> Result<MinedNegatives> {
    if answer_tokens.is_empty() {
        return Err(Error::Other("mine_hard_negatives with empty answer".into()));
    }
    let ranked = bm25.rank(question_tokens);
    let mut ids = Vec::with_capacity(n);
    for (id, _score) in ranked {
        let passage = kb.passage(id)?;
        if contains_subsequence(&passage.full_tokens(), answer_tokens) {
            continue;
        }
        ids.push(id);
        if ids.len() == n {
            break;
        }
    }
    let complete = ids.len() == n;
    if !complete {
        log::warn!(
            "hard-negative mining found {} of {n} requested negatives",
            ids.len()
        );
    }
    Ok(MinedNegatives { ids, complete })
}

//! BM25 ranking over the knowledge base.
//!
//! Postings and document statistics are precomputed once per knowledge
//! base; scoring walks the postings of each query token. The formula is
//! the common non-negative variant:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = Σ_{t in q} idf(t) · tf·(k1+1) / (tf + k1·(1 - b + b·|d|/avgdl))
//! ```
//!
//! Query tokens are scored per occurrence, and passages are scored over
//! title plus body tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeBase, PassageId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    n_docs: usize,
    avgdl: f64,
    doc_len: Vec<f64>,
    /// term -> (passage id, term frequency), ascending by id.
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build(kb: &KnowledgeBase, params: &Bm25Params) -> Self {
        let n_docs = kb.len();
        let mut doc_len = Vec::with_capacity(n_docs);
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for p in &kb.passages {
            let tokens = p.full_tokens();
            doc_len.push(tokens.len() as f64);
            let mut tf: HashMap<&String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings
                    .entry(term.clone())
                    .or_default()
                    .push((p.passage_id as u32, count));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|&(id, _)| id);
        }
        let avgdl = if n_docs == 0 {
            0.0
        } else {
            doc_len.iter().sum::<f64>() / n_docs as f64
        };
        Bm25Index {
            params: *params,
            n_docs,
            avgdl,
            doc_len,
            postings,
        }
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, |l| l.len()) as f64;
        let n = self.n_docs as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every passage against `query_tokens` and returns the full
    /// ranking: descending score, ties by ascending passage id. Tokens
    /// absent from the knowledge base contribute nothing, so an all-unknown
    /// query ranks every passage at score 0 in id order.
    pub fn rank(&self, query_tokens: &[String]) -> Vec<(PassageId, f64)> {
        let mut scores = vec![0.0f64; self.n_docs];
        let Bm25Params { k1, b } = self.params;
        for term in query_tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = k1 * (1.0 - b + b * self.doc_len[doc as usize] / self.avgdl);
                scores[doc as usize] += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(PassageId, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then_with(|| ia.cmp(ib)));
        ranked
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_knowledge_base, tokenize, CorpusConfig, DocKind, Document};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kb_with(bodies: &[String]) -> KnowledgeBase {
        let docs: Vec<Document> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| Document {
                doc_id: format!("d{i}"),
                title: format!("title{i}"),
                body: b.clone(),
                kind: DocKind::Article,
                abstract_text: None,
            })
            .collect();
        build_knowledge_base(&docs, vec![], &CorpusConfig::default())
            .unwrap()
            .0
    }

    /// Textbook BM25 computed directly per (query, document): term
    /// frequencies by counting, document frequencies by scanning the whole
    /// collection. No postings, no shared code with the index.
    fn naive_bm25(
        query: &[String],
        kb: &KnowledgeBase,
        doc: usize,
        k1: f64,
        b: f64,
    ) -> f64 {
        let all_tokens: Vec<Vec<String>> = kb.passages.iter().map(|p| p.full_tokens()).collect();
        let n = all_tokens.len() as f64;
        let avgdl = all_tokens.iter().map(|t| t.len() as f64).sum::<f64>() / n;
        let d = &all_tokens[doc];
        let mut score = 0.0;
        for term in query {
            let df = all_tokens.iter().filter(|t| t.contains(term)).count() as f64;
            let tf = d.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
        }
        score
    }

    fn random_corpus(n_docs: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_docs)
            .map(|_| {
                let len = rng.random_range(5..40);
                (0..len)
                    .map(|_| format!("w{}", rng.random_range(0..30)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn scores_and_order_match_the_naive_formula() {
        let kb = kb_with(&random_corpus(25, 3));
        let index = Bm25Index::build(&kb, &Bm25Params::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let qlen = rng.random_range(1..6);
            let query: Vec<String> = (0..qlen)
                .map(|_| format!("w{}", rng.random_range(0..35)))
                .collect();
            let ranked = index.rank(&query);
            assert_eq!(ranked.len(), kb.len());
            for &(id, score) in &ranked {
                let expected = naive_bm25(&query, &kb, id, 1.2, 0.75);
                assert!(
                    (score - expected).abs() < 1e-9,
                    "doc {id}: {score} vs {expected} for {query:?}"
                );
            }
            for w in ranked.windows(2) {
                let ((ia, sa), (ib, sb)) = (w[0], w[1]);
                assert!(sa > sb || (sa == sb && ia < ib));
            }
        }
    }

    #[test]
    fn unknown_query_scores_everything_zero_in_id_order() {
        let kb = kb_with(&random_corpus(10, 4));
        let index = Bm25Index::build(&kb, &Bm25Params::default());
        let ranked = index.rank(&tokenize("zzz qqq xxx"));
        assert!(ranked.iter().all(|&(_, s)| s == 0.0));
        let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rare_terms_outweigh_common_terms() {
        let mut bodies: Vec<String> = (0..10).map(|i| format!("common filler{i}")).collect();
        bodies[3] = "common rare".into();
        let kb = kb_with(&bodies);
        let index = Bm25Index::build(&kb, &Bm25Params::default());
        let ranked = index.rank(&tokenize("common rare"));
        assert_eq!(ranked[0].0, 3);
        let common_only = index.rank(&tokenize("common"));
        assert!(ranked[0].1 > common_only[0].1);
    }

    #[test]
    fn titles_participate_in_scoring() {
        let kb = kb_with(&vec!["alpha beta".to_string(), "gamma delta".to_string()]);
        let index = Bm25Index::build(&kb, &Bm25Params::default());
        // "title1" appears only in the second passage's title.
        let ranked = index.rank(&tokenize("title1"));
        assert_eq!(ranked[0].0, 1);
        assert!(ranked[0].1 > 0.0);
        assert_eq!(ranked[1].1, 0.0);
    }

    #[test]
    fn repeated_query_tokens_accumulate() {
        let kb = kb_with(&random_corpus(8, 5));
        let index = Bm25Index::build(&kb, &Bm25Params::default());
        let single = index.rank(&tokenize("w1"));
        let double = index.rank(&tokenize("w1 w1"));
        for (&(ia, sa), &(ib, sb)) in single.iter().zip(&double) {
            assert_eq!(ia, ib);
            assert!((sb - 2.0 * sa).abs() < 1e-12);
        }
    }
}

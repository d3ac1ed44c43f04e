//! Hierarchical navigable small-world graph for inner-product search.
//!
//! Standard HNSW construction: each node draws a geometric level from a
//! seeded generator, is greedily routed down from the entry point, and is
//! connected to its `m` best candidates per layer found by an
//! `ef_construction`-bounded beam. Two departures from the textbook build
//! keep the graph well-formed for our contracts:
//!
//! - pruning is symmetric: an edge is removed from both endpoints or not at
//!   all, and never when it is the counterpart's last link on that layer;
//! - after all inserts, any node unreachable from the entry point on layer 0
//!   is linked to its best reachable neighbor, so layer-0 reachability is
//!   unconditional.
//!
//! Searches never mutate the graph, so a built index is safe to share
//! across threads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingMatrix;

use super::{dot, Scored, SearchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswConfig {
    /// Bi-directional links per node per layer (layer 0 allows `2m`).
    pub m: usize,
    /// Beam width during construction.
    pub ef_construction: usize,
    /// Beam width during search; the effective width is `max(ef_search, k)`.
    pub ef_search: usize,
    /// Seed for the level draws.
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        HnswConfig {
            m: 16,
            ef_construction: 200,
            ef_search: 128,
            seed: 0x9a17,
        }
    }
}

const MAX_LEVEL: usize = 31;

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub config: HnswConfig,
    /// `links[node][level]` holds that node's neighbors on `level`; a node
    /// participates in levels `0..=node_level`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
}

struct Bitset(Vec<u64>);

impl Bitset {
    fn new(n: usize) -> Self {
        Bitset(vec![0; n.div_ceil(64)])
    }

    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let fresh = self.0[w] & (1 << b) == 0;
        self.0[w] |= 1 << b;
        fresh
    }

    #[inline]
    fn contains(&self, i: u32) -> bool {
        self.0[(i / 64) as usize] & (1 << (i % 64)) != 0
    }
}

impl HnswIndex {
    pub fn build(emb: &EmbeddingMatrix, config: &HnswConfig) -> Self {
        assert!(config.m >= 2, "m must be at least 2");
        assert!(config.ef_construction >= 1 && config.ef_search >= 1);
        let n = emb.n_rows();
        let ml = 1.0 / (config.m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Levels are drawn up front, one per node in id order, so the graph
        // depends only on (embeddings, config).
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
            })
            .collect();

        let mut index = HnswIndex {
            config: *config,
            links: Vec::with_capacity(n),
            entry: 0,
            max_level: 0,
        };
        for (i, &level) in levels.iter().enumerate() {
            index.insert(emb, i as u32, level);
        }
        if n > 0 {
            index.repair_layer0_connectivity(emb);
        }
        index
    }

    fn insert(&mut self, emb: &EmbeddingMatrix, id: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let q = emb.row(id as usize);
        let mut ep = vec![Scored {
            score: dot(q, emb.row(self.entry as usize)),
            id: self.entry,
        }];
        let mut lev = self.max_level;
        while lev > level {
            ep = self.search_layer(emb, q, &ep, 1, lev);
            lev -= 1;
        }
        for lev in (0..=level.min(self.max_level)).rev() {
            let cands = self.search_layer(emb, q, &ep, self.config.ef_construction, lev);
            let m_max = self.m_max(lev);
            for c in cands.iter().take(self.config.m) {
                self.links[id as usize][lev].push(c.id);
                self.links[c.id as usize][lev].push(id);
                self.prune(emb, c.id, lev, m_max);
            }
            ep = cands;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = id;
        }
    }

    fn m_max(&self, level: usize) -> usize {
        if level == 0 {
            self.config.m * 2
        } else {
            self.config.m
        }
    }

    /// Trims `node`'s layer list to `m_max` by keeping the highest-scoring
    /// neighbors. Every removal is mirrored on the neighbor; an edge that is
    /// the neighbor's last link on this layer is kept instead.
    fn prune(&mut self, emb: &EmbeddingMatrix, node: u32, level: usize, m_max: usize) {
        if self.links[node as usize][level].len() <= m_max {
            return;
        }
        let nvec = emb.row(node as usize);
        let mut scored: Vec<Scored> = self.links[node as usize][level]
            .iter()
            .map(|&nb| Scored {
                score: dot(nvec, emb.row(nb as usize)),
                id: nb,
            })
            .collect();
        scored.sort_unstable_by(|a, b| b.cmp(a));
        let mut kept: Vec<u32> = scored[..m_max].iter().map(|s| s.id).collect();
        for dropped in &scored[m_max..] {
            let other = &mut self.links[dropped.id as usize][level];
            if other.len() <= 1 {
                kept.push(dropped.id);
                continue;
            }
            other.retain(|&x| x != node);
        }
        self.links[node as usize][level] = kept;
    }

    /// Beam search on one layer. Returns up to `ef` results sorted by
    /// descending score (ties: ascending id).
    fn search_layer(
        &self,
        emb: &EmbeddingMatrix,
        q: &[f64],
        entries: &[Scored],
        ef: usize,
        level: usize,
    ) -> Vec<Scored> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let mut visited = Bitset::new(self.links.len());
        let mut candidates = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.id) {
                candidates.push(e);
                results.push(Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0).expect("results never empty");
            if results.len() == ef && c < worst {
                break;
            }
            for &nb in &self.links[c.id as usize][level] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = Scored {
                    score: dot(q, emb.row(nb as usize)),
                    id: nb,
                };
                let worst = results.peek().map(|r| r.0).expect("results never empty");
                if results.len() < ef || s > worst {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    fn repair_layer0_connectivity(&mut self, emb: &EmbeddingMatrix) {
        let n = self.links.len();
        let mut reachable = Bitset::new(n);
        let mut stack = vec![self.entry];
        reachable.insert(self.entry);
        while let Some(v) = stack.pop() {
            for &nb in &self.links[v as usize][0] {
                if reachable.insert(nb) {
                    stack.push(nb);
                }
            }
        }
        for u in 0..n as u32 {
            if reachable.contains(u) {
                continue;
            }
            let uvec = emb.row(u as usize);
            let mut best: Option<Scored> = None;
            for v in 0..n as u32 {
                if !reachable.contains(v) {
                    continue;
                }
                let s = Scored {
                    score: dot(uvec, emb.row(v as usize)),
                    id: v,
                };
                if best.is_none_or(|b| s > b) {
                    best = Some(s);
                }
            }
            let best = best.expect("entry point is always reachable").id;
            self.links[u as usize][0].push(best);
            self.links[best as usize][0].push(u);
            // u's whole component is now reachable.
            let mut stack = vec![u];
            reachable.insert(u);
            while let Some(v) = stack.pop() {
                for &nb in &self.links[v as usize][0] {
                    if reachable.insert(nb) {
                        stack.push(nb);
                    }
                }
            }
        }
    }

    pub(crate) fn search(&self, emb: &EmbeddingMatrix, query: &[f64], k: usize) -> SearchResult {
        let ef = self.config.ef_search.max(k);
        let mut ep = vec![Scored {
            score: dot(query, emb.row(self.entry as usize)),
            id: self.entry,
        }];
        for lev in (1..=self.max_level).rev() {
            ep = self.search_layer(emb, query, &ep, 1, lev);
        }
        let mut out = self.search_layer(emb, query, &ep, ef, 0);
        out.truncate(k);
        SearchResult {
            ids: out.iter().map(|s| s.id as usize).collect(),
            scores: out.iter().map(|s| s.score).collect(),
        }
    }

    pub fn entry_point(&self) -> u32 {
        self.entry
    }

    pub fn top_level(&self) -> usize {
        self.max_level
    }

    pub fn node_level(&self, id: usize) -> usize {
        self.links[id].len() - 1
    }

    pub fn neighbors(&self, id: usize, level: usize) -> &[u32] {
        &self.links[id][level]
    }

    /// (links per node per level, entry, max level) for persistence.
    pub(crate) fn raw_parts(&self) -> (&Vec<Vec<Vec<u32>>>, u32, usize) {
        (&self.links, self.entry, self.max_level)
    }

    pub(crate) fn from_raw_parts(
        config: HnswConfig,
        links: Vec<Vec<Vec<u32>>>,
        entry: u32,
        max_level: usize,
    ) -> Self {
        HnswIndex {
            config,
            links,
            entry,
            max_level,
        }
    }

    /// Checks the structural invariants: symmetric link lists on every
    /// level and full reachability from the entry point on layer 0.
    /// Returns a description of the first violation, if any.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.links.len();
        for (id, node_links) in self.links.iter().enumerate() {
            for (lev, nbs) in node_links.iter().enumerate() {
                for &nb in nbs {
                    if nb as usize >= n {
                        return Err(format!("node {id} links to out-of-range {nb}"));
                    }
                    let back = &self.links[nb as usize];
                    if back.len() <= lev || !back[lev].contains(&(id as u32)) {
                        return Err(format!(
                            "asymmetric link: {id} -> {nb} on level {lev} has no reverse"
                        ));
                    }
                }
            }
        }
        if n == 0 {
            return Ok(());
        }
        let mut reachable = Bitset::new(n);
        let mut stack = vec![self.entry];
        reachable.insert(self.entry);
        let mut count = 1usize;
        while let Some(v) = stack.pop() {
            for &nb in &self.links[v as usize][0] {
                if reachable.insert(nb) {
                    count += 1;
                    stack.push(nb);
                }
            }
        }
        if count != n {
            return Err(format!("{} of {n} nodes unreachable on layer 0", n - count));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::testutil::{argsort_topk, random_query, random_unit_embeddings};

    fn small_config(seed: u64) -> HnswConfig {
        HnswConfig {
            m: 8,
            ef_construction: 64,
            ef_search: 48,
            seed,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let emb = random_unit_embeddings(300, 12, 5);
        let a = HnswIndex::build(&emb, &small_config(7));
        let b = HnswIndex::build(&emb, &small_config(7));
        assert_eq!(a, b);
        let c = HnswIndex::build(&emb, &small_config(8));
        assert_ne!(a, c, "different seeds should reshuffle levels");
    }

    #[test]
    fn invariants_hold_after_construction() {
        for seed in 0..3 {
            let emb = random_unit_embeddings(500, 10, seed);
            let idx = HnswIndex::build(&emb, &small_config(seed));
            idx.check_invariants().unwrap();
        }
    }

    #[test]
    fn level_distribution_decays() {
        let emb = random_unit_embeddings(2000, 4, 3);
        let idx = HnswIndex::build(&emb, &small_config(1));
        let mut counts = vec![0usize; idx.top_level() + 1];
        for i in 0..2000 {
            counts[idx.node_level(i)] += 1;
        }
        assert!(counts[0] > 2000 / 2, "most nodes should be level 0");
        for w in counts.windows(2) {
            assert!(w[1] <= w[0] || w[0] == 0);
        }
    }

    #[test]
    fn small_index_search_is_exhaustive() {
        // With n below ef_search the beam touches everything reachable, so
        // results must equal the brute-force ranking exactly.
        let emb = random_unit_embeddings(40, 6, 9);
        let idx = HnswIndex::build(&emb, &small_config(2));
        for qs in 0..10 {
            let q = random_query(6, 50 + qs);
            let got = idx.search(&emb, &q, 10);
            let oracle = argsort_topk(&emb, &q, 10);
            assert_eq!(got.ids, oracle);
        }
    }

    #[test]
    fn duplicate_vectors_break_ties_by_id() {
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend([0.6, 0.8]);
        }
        let emb = crate::encoder::EmbeddingMatrix::from_rows(0, 2, "t".into(), data).unwrap();
        let idx = HnswIndex::build(&emb, &small_config(4));
        let got = idx.search(&emb, &[0.6, 0.8], 6);
        assert_eq!(got.ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn recall_at_10_on_random_unit_vectors() {
        let emb = random_unit_embeddings(2000, 16, 21);
        let idx = HnswIndex::build(
            &emb,
            &HnswConfig {
                m: 16,
                ef_construction: 100,
                ef_search: 64,
                seed: 1,
            },
        );
        let mut hit = 0usize;
        let mut total = 0usize;
        for qs in 0..50 {
            let q = random_query(16, 900 + qs);
            let got = idx.search(&emb, &q, 10);
            let truth = argsort_topk(&emb, &q, 10);
            let truth: std::collections::HashSet<usize> = truth.into_iter().collect();
            hit += got.ids.iter().filter(|i| truth.contains(i)).count();
            total += 10;
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.93, "recall@10 = {recall}");
    }

    #[test]
    fn search_results_are_sorted_and_unique() {
        let emb = random_unit_embeddings(400, 8, 2);
        let idx = HnswIndex::build(&emb, &small_config(3));
        let q = random_query(8, 77);
        let got = idx.search(&emb, &q, 50);
        assert_eq!(got.ids.len(), 50);
        let unique: std::collections::HashSet<_> = got.ids.iter().collect();
        assert_eq!(unique.len(), 50);
        for w in got.scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }
}

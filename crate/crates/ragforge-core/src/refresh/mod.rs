//! Knowledge-base refresh: re-encode passages under a parameter snapshot,
//! rebuild the index from scratch, and swap it in atomically.
//!
//! A refresh job moves through four strictly ordered phases:
//!
//! ```text
//! encoding -> indexing -> ready -> swapped
//! ```
//!
//! Re-encoding is sharded and may run on several workers; a shard ledger
//! records completion, and indexing refuses to start until every shard has
//! reported in. Failures abort the whole job before anything is published:
//! there is no partial embedding matrix and no index built from one.
//!
//! The [`IndexHandle`] is the single point readers go through. Swapping
//! installs a fully built snapshot with `version = current + 1`; readers
//! that already hold the old snapshot keep it alive until they drop it, so
//! every search runs against exactly one generation. The handle retains at
//! most the current and the immediately previous snapshot.
//!
//! [`run_cycle`] executes one job synchronously and is what the in-line
//! (test-mode) refresh path calls between steps; [`worker`] wraps the same
//! cycle in a background thread whose swaps land at step boundaries.

mod worker;

pub use worker::{BackgroundRefresher, JobReport, ParamsBoard, ParamsSlot, ParamsSource};

use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::ann::{HnswConfig, IndexKind, IndexSnapshot};
use crate::corpus::KnowledgeBase;
use crate::encoder::{EmbeddingMatrix, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshConfig {
    /// Steps between swap and the next cycle trigger.
    pub refresh_every: u64,
    /// Worker threads for re-encoding.
    pub n_workers: usize,
    /// Shards the passage list is split into.
    pub n_shards: usize,
    /// Extra attempts after a failed cycle.
    pub max_retries: u32,
    pub index_kind: IndexKind,
    pub hnsw: HnswConfig,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        RefreshConfig {
            refresh_every: 500,
            n_workers: 2,
            n_shards: 8,
            max_retries: 2,
            index_kind: IndexKind::Hnsw,
            hnsw: HnswConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPhase {
    /// No job has run yet.
    Idle,
    Encoding,
    Indexing,
    Ready,
    Swapped,
}

/// Snapshot of refresh progress, also what `ragforge status` prints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshStatus {
    pub job_id: u64,
    pub phase: RefreshPhase,
    pub shards_done: usize,
    pub n_shards: usize,
    pub current_version: u64,
}

/// Shared, optionally file-backed refresh status.
pub struct StatusBoard {
    inner: Mutex<RefreshStatus>,
    path: Option<PathBuf>,
}

impl StatusBoard {
    pub fn new(current_version: u64) -> Self {
        StatusBoard {
            inner: Mutex::new(RefreshStatus {
                job_id: 0,
                phase: RefreshPhase::Idle,
                shards_done: 0,
                n_shards: 0,
                current_version,
            }),
            path: None,
        }
    }

    /// Mirrors every update into `path` as JSON.
    pub fn with_file(mut self, path: PathBuf) -> Self {
        self.path = Some(path);
        self
    }

    pub fn snapshot(&self) -> RefreshStatus {
        self.inner.lock().clone()
    }

    fn persist(&self, status: &RefreshStatus) {
        if let Some(path) = &self.path {
            let json = serde_json::to_string_pretty(status).expect("status serializes");
            if let Err(e) = std::fs::write(path, json + "\n") {
                log::warn!("failed to write refresh status file: {e}");
            }
        }
    }

    pub fn begin_job(&self, job_id: u64, n_shards: usize) {
        let mut s = self.inner.lock();
        s.job_id = job_id;
        s.phase = RefreshPhase::Encoding;
        s.shards_done = 0;
        s.n_shards = n_shards;
        self.persist(&s);
    }

    pub fn shard_done(&self) {
        let mut s = self.inner.lock();
        s.shards_done += 1;
        self.persist(&s);
    }

    /// Advances the phase, enforcing the strict order. Entering `Indexing`
    /// additionally requires every shard to have completed.
    pub fn advance(&self, phase: RefreshPhase) -> Result<()> {
        let mut s = self.inner.lock();
        let ok = matches!(
            (s.phase, phase),
            (RefreshPhase::Encoding, RefreshPhase::Indexing)
                | (RefreshPhase::Indexing, RefreshPhase::Ready)
                | (RefreshPhase::Ready, RefreshPhase::Swapped)
        );
        if !ok {
            return Err(Error::RefreshFailed {
                job_id: s.job_id,
                reason: format!("illegal phase transition {:?} -> {phase:?}", s.phase),
            });
        }
        if phase == RefreshPhase::Indexing && s.shards_done != s.n_shards {
            return Err(Error::RefreshFailed {
                job_id: s.job_id,
                reason: format!(
                    "indexing requested with {}/{} shards complete",
                    s.shards_done, s.n_shards
                ),
            });
        }
        s.phase = phase;
        self.persist(&s);
        Ok(())
    }

    pub fn set_swapped(&self, version: u64) -> Result<()> {
        self.advance(RefreshPhase::Swapped)?;
        let mut s = self.inner.lock();
        s.current_version = version;
        self.persist(&s);
        Ok(())
    }
}

/// Per-shard completion record for one re-encode pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLedger {
    done: Vec<bool>,
}

impl ShardLedger {
    pub fn new(n_shards: usize) -> Self {
        ShardLedger {
            done: vec![false; n_shards],
        }
    }

    pub fn mark_done(&mut self, shard: usize) {
        self.done[shard] = true;
    }

    /// Test hook: forget a shard's completion to exercise the rebuild guard.
    pub fn clear(&mut self, shard: usize) {
        self.done[shard] = false;
    }

    pub fn n_shards(&self) -> usize {
        self.done.len()
    }

    pub fn is_complete(&self) -> bool {
        self.done.iter().all(|&d| d)
    }

    pub fn first_incomplete(&self) -> Option<usize> {
        self.done.iter().position(|&d| !d)
    }
}

/// A complete re-encode: the matrix plus the ledger proving every shard ran.
#[derive(Debug, Clone, PartialEq)]
pub struct ReencodeOutput {
    pub embeddings: EmbeddingMatrix,
    pub ledger: ShardLedger,
}

/// Injectable shard failures for fault testing. The default plan never
/// fires; `fail_shard(s, n)` makes shard `s` fail its next `n` executions.
#[derive(Debug, Default)]
pub struct FaultPlan {
    shard: usize,
    remaining: AtomicU32,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn fail_shard(shard: usize, times: u32) -> Self {
        FaultPlan {
            shard,
            remaining: AtomicU32::new(times),
        }
    }

    fn trip(&self, shard: usize) -> bool {
        if shard != self.shard {
            return false;
        }
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

/// Re-encodes every passage under `params`, splitting the work into
/// `n_shards` contiguous ranges executed by `n_workers` threads.
///
/// Row `i` of the result is exactly `params.encode_passage(passage i)`;
/// rows are computed independently and assembled by shard order, so the
/// output is bitwise identical for any worker count. A shard failure aborts
/// the whole pass: no matrix is returned, partial results are dropped.
pub fn reencode_sharded(
    kb: &KnowledgeBase,
    params: &EncoderParams,
    version: u64,
    n_workers: usize,
    n_shards: usize,
    faults: &FaultPlan,
    on_shard_done: &(dyn Fn(usize) + Sync),
) -> Result<ReencodeOutput> {
    if n_workers == 0 || n_shards == 0 {
        return Err(Error::InvalidConfig(
            "reencode needs at least one worker and one shard".into(),
        ));
    }
    let n = kb.len();
    let dim = params.config.d_emb;
    let shard_size = n.div_ceil(n_shards).max(1);
    let results: Mutex<Vec<Option<Vec<f64>>>> = Mutex::new(vec![None; n_shards]);
    let ledger = Mutex::new(ShardLedger::new(n_shards));
    let next_shard = AtomicUsize::new(0);

    let encode_shard = |shard: usize| -> Result<()> {
        let start = (shard * shard_size).min(n);
        let end = ((shard + 1) * shard_size).min(n);
        let mut rows = Vec::with_capacity((end - start) * dim);
        for pid in start..end {
            rows.extend(params.encode_passage(&kb.passages[pid]));
        }
        if faults.trip(shard) {
            return Err(Error::RefreshFailed {
                job_id: 0,
                reason: format!("injected fault at shard {shard}"),
            });
        }
        results.lock()[shard] = Some(rows);
        ledger.lock().mark_done(shard);
        on_shard_done(shard);
        Ok(())
    };

    let outcome: Result<()> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(n_workers);
        for _ in 0..n_workers {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let shard = next_shard.fetch_add(1, Ordering::SeqCst);
                    if shard >= n_shards {
                        return Ok(());
                    }
                    encode_shard(shard)?;
                }
            }));
        }
        let mut first_err = None;
        for h in handles {
            let joined = h.join().expect("reencode worker panicked");
            if let (Err(e), None) = (joined, &first_err) {
                first_err = Some(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    });
    outcome?;

    let ledger = ledger.into_inner();
    debug_assert!(ledger.is_complete());
    let mut data = Vec::with_capacity(n * dim);
    for shard_rows in results.into_inner() {
        data.extend(shard_rows.expect("complete ledger implies all shards present"));
    }
    let embeddings = EmbeddingMatrix::from_rows(version, dim, params.w_p_hash(), data)?;
    Ok(ReencodeOutput { embeddings, ledger })
}

/// Single-threaded convenience wrapper returning just the matrix.
pub fn reencode(
    kb: &KnowledgeBase,
    params: &EncoderParams,
    version: u64,
    n_workers: usize,
) -> Result<EmbeddingMatrix> {
    let shards = n_workers.max(1) * 2;
    reencode_sharded(kb, params, version, n_workers, shards, &FaultPlan::none(), &|_| {})
        .map(|out| out.embeddings)
}

/// Builds a fresh index over a completed re-encode. The previous index is
/// never updated in place; every refresh is a full rebuild. Refuses to run
/// if the ledger reports an incomplete shard.
pub fn rebuild(output: ReencodeOutput, kind: IndexKind, hnsw: &HnswConfig) -> Result<IndexSnapshot> {
    if let Some(shard) = output.ledger.first_incomplete() {
        return Err(Error::RefreshFailed {
            job_id: 0,
            reason: format!("rebuild requested but shard {shard} never completed"),
        });
    }
    Ok(IndexSnapshot::build(output.embeddings, kind, hnsw))
}

/// The swap point readers share. Holds the current snapshot and (for the
/// retention contract) the one it replaced; anything older lives only as
/// long as readers still hold it.
pub struct IndexHandle {
    current: RwLock<Arc<IndexSnapshot>>,
    previous: Mutex<Option<Arc<IndexSnapshot>>>,
}

impl IndexHandle {
    pub fn new(initial: IndexSnapshot) -> Self {
        IndexHandle {
            current: RwLock::new(Arc::new(initial)),
            previous: Mutex::new(None),
        }
    }

    /// The current snapshot. A caller that searches through the returned
    /// `Arc` sees exactly one generation no matter how many swaps happen
    /// meanwhile.
    pub fn current(&self) -> Arc<IndexSnapshot> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.current.read().version()
    }

    pub fn previous_version(&self) -> Option<u64> {
        self.previous.lock().as_ref().map(|s| s.version())
    }

    /// Atomically installs `next`, which must advance the version by
    /// exactly one. Returns the retired snapshot.
    pub fn swap(&self, next: IndexSnapshot) -> Result<Arc<IndexSnapshot>> {
        let next = Arc::new(next);
        let mut slot = self.current.write();
        if next.version() != slot.version() + 1 {
            return Err(Error::StaleSwap {
                current: slot.version(),
                offered: next.version(),
            });
        }
        let retired = std::mem::replace(&mut *slot, next);
        *self.previous.lock() = Some(retired.clone());
        Ok(retired)
    }
}

/// One synchronous refresh cycle: encode, index, ready. Returns the built
/// snapshot; the caller decides when the swap lands (the in-line path swaps
/// immediately, the background path parks it for the next step boundary).
pub fn run_cycle(
    kb: &KnowledgeBase,
    params: &EncoderParams,
    next_version: u64,
    config: &RefreshConfig,
    status: &StatusBoard,
    faults: &FaultPlan,
    job_id: u64,
) -> Result<IndexSnapshot> {
    status.begin_job(job_id, config.n_shards);
    let output = reencode_sharded(
        kb,
        params,
        next_version,
        config.n_workers,
        config.n_shards,
        faults,
        &|_| status.shard_done(),
    )
    .map_err(|e| Error::RefreshFailed {
        job_id,
        reason: e.to_string(),
    })?;
    status.advance(RefreshPhase::Indexing)?;
    let snapshot = rebuild(output, config.index_kind, &config.hnsw).map_err(|e| {
        Error::RefreshFailed {
            job_id,
            reason: e.to_string(),
        }
    })?;
    status.advance(RefreshPhase::Ready)?;
    Ok(snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_knowledge_base, CorpusConfig, DocKind, Document};
    use crate::encoder::EncoderConfig;

    fn kb(n_docs: usize) -> KnowledgeBase {
        let docs: Vec<Document> = (0..n_docs)
            .map(|i| Document {
                doc_id: format!("d{i}"),
                title: format!("title{i}"),
                body: (0..20).map(|j| format!("w{}", (i * 7 + j) % 40)).collect::<Vec<_>>().join(" "),
                kind: DocKind::Article,
                abstract_text: None,
            })
            .collect();
        build_knowledge_base(&docs, vec![], &CorpusConfig::default())
            .unwrap()
            .0
    }

    fn params(kb: &KnowledgeBase, seed: u64) -> EncoderParams {
        let cfg = EncoderConfig {
            d_feat: 128,
            d_emb: 8,
            d_feat_gen: 32,
            hash_seed: 1,
        };
        EncoderParams::init(cfg, kb.vocab.len(), seed)
    }

    #[test]
    fn rows_match_single_passage_encoding() {
        let kb = kb(13);
        let p = params(&kb, 1);
        let emb = reencode(&kb, &p, 3, 1).unwrap();
        assert_eq!(emb.version, 3);
        assert_eq!(emb.n_rows(), kb.len());
        assert_eq!(emb.params_hash, p.w_p_hash());
        for (i, passage) in kb.passages.iter().enumerate() {
            assert_eq!(emb.row(i), p.encode_passage(passage).as_slice());
        }
    }

    #[test]
    fn worker_count_does_not_change_the_matrix() {
        let kb = kb(23);
        let p = params(&kb, 2);
        let one = reencode_sharded(&kb, &p, 0, 1, 7, &FaultPlan::none(), &|_| {}).unwrap();
        let four = reencode_sharded(&kb, &p, 0, 4, 7, &FaultPlan::none(), &|_| {}).unwrap();
        assert_eq!(one.embeddings, four.embeddings);
        assert!(one.ledger.is_complete() && four.ledger.is_complete());
    }

    #[test]
    fn shard_count_does_not_change_the_matrix() {
        let kb = kb(17);
        let p = params(&kb, 3);
        let a = reencode_sharded(&kb, &p, 0, 2, 1, &FaultPlan::none(), &|_| {}).unwrap();
        let b = reencode_sharded(&kb, &p, 0, 2, 5, &FaultPlan::none(), &|_| {}).unwrap();
        let c = reencode_sharded(&kb, &p, 0, 2, 64, &FaultPlan::none(), &|_| {}).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(b.embeddings, c.embeddings);
    }

    #[test]
    fn injected_shard_fault_aborts_the_pass() {
        let kb = kb(12);
        let p = params(&kb, 4);
        let faults = FaultPlan::fail_shard(2, 1);
        let first = reencode_sharded(&kb, &p, 0, 2, 4, &faults, &|_| {});
        assert!(first.is_err());
        // The fault was consumed; the retry succeeds.
        let second = reencode_sharded(&kb, &p, 0, 2, 4, &faults, &|_| {});
        assert!(second.is_ok());
    }

    #[test]
    fn rebuild_refuses_incomplete_ledger() {
        let kb = kb(6);
        let p = params(&kb, 5);
        let mut out = reencode_sharded(&kb, &p, 1, 1, 3, &FaultPlan::none(), &|_| {}).unwrap();
        out.ledger.clear(1);
        let err = rebuild(out, IndexKind::Exact, &HnswConfig::default());
        assert!(matches!(err, Err(Error::RefreshFailed { .. })));
    }

    #[test]
    fn swap_enforces_version_increments() {
        let kb = kb(5);
        let p = params(&kb, 6);
        let handle = IndexHandle::new(IndexSnapshot::build_exact(reencode(&kb, &p, 0, 1).unwrap()));
        assert_eq!(handle.version(), 0);

        let v2 = IndexSnapshot::build_exact(reencode(&kb, &p, 2, 1).unwrap());
        assert!(matches!(handle.swap(v2), Err(Error::StaleSwap { .. })));

        let v1 = IndexSnapshot::build_exact(reencode(&kb, &p, 1, 1).unwrap());
        let retired = handle.swap(v1).unwrap();
        assert_eq!(retired.version(), 0);
        assert_eq!(handle.version(), 1);
        assert_eq!(handle.previous_version(), Some(0));
    }

    #[test]
    fn readers_keep_a_consistent_snapshot_across_swaps() {
        let kb = kb(5);
        let p = params(&kb, 7);
        let handle = IndexHandle::new(IndexSnapshot::build_exact(reencode(&kb, &p, 0, 1).unwrap()));
        let held = handle.current();
        let v1 = IndexSnapshot::build_exact(reencode(&kb, &p, 1, 1).unwrap());
        handle.swap(v1).unwrap();
        assert_eq!(held.version(), 0);
        assert_eq!(handle.current().version(), 1);
    }

    #[test]
    fn retired_snapshots_die_with_their_last_reader() {
        let kb = kb(4);
        let p = params(&kb, 8);
        let handle = IndexHandle::new(IndexSnapshot::build_exact(reencode(&kb, &p, 0, 1).unwrap()));
        let v0 = handle.current();
        let weak0 = Arc::downgrade(&v0);
        for v in 1..=2 {
            let snap = IndexSnapshot::build_exact(reencode(&kb, &p, v, 1).unwrap());
            handle.swap(snap).unwrap();
        }
        // v0 is out of the handle entirely (only v1 is retained as previous).
        assert_eq!(handle.previous_version(), Some(1));
        assert!(weak0.upgrade().is_some());
        drop(v0);
        assert!(weak0.upgrade().is_none(), "v0 should be freed with its last reader");
    }

    #[test]
    fn run_cycle_walks_the_phases_in_order() {
        let kb = kb(9);
        let p = params(&kb, 9);
        let config = RefreshConfig {
            n_shards: 3,
            n_workers: 2,
            index_kind: IndexKind::Exact,
            ..RefreshConfig::default()
        };
        let status = StatusBoard::new(0);
        let snap = run_cycle(&kb, &p, 1, &config, &status, &FaultPlan::none(), 1).unwrap();
        assert_eq!(snap.version(), 1);
        let s = status.snapshot();
        assert_eq!(s.phase, RefreshPhase::Ready);
        assert_eq!(s.shards_done, 3);
        assert_eq!(s.job_id, 1);
    }

    #[test]
    fn phase_order_is_enforced() {
        let status = StatusBoard::new(0);
        // Idle -> Indexing is illegal.
        assert!(status.advance(RefreshPhase::Indexing).is_err());
        status.begin_job(1, 2);
        // Encoding -> Indexing with incomplete shards is illegal.
        assert!(status.advance(RefreshPhase::Indexing).is_err());
        status.shard_done();
        status.shard_done();
        status.advance(RefreshPhase::Indexing).unwrap();
        // Skipping Ready is illegal.
        assert!(status.advance(RefreshPhase::Swapped).is_err());
        status.advance(RefreshPhase::Ready).unwrap();
        status.set_swapped(1).unwrap();
        assert_eq!(status.snapshot().current_version, 1);
    }

    #[test]
    fn status_file_mirrors_updates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refresh_status.json");
        let status = StatusBoard::new(0).with_file(path.clone());
        status.begin_job(3, 2);
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: RefreshStatus = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.job_id, 3);
        assert_eq!(parsed.phase, RefreshPhase::Encoding);
    }
}

//! Background refresh worker.
//!
//! The worker thread polls the shared step counter; once enough steps have
//! passed since the last swap it takes a parameter snapshot, runs a full
//! cycle (encode, index), and parks the built snapshot. The training thread
//! calls [`BackgroundRefresher::try_commit`] at each step boundary, which is
//! the only place swaps happen — so a swap never lands mid-step, and at most
//! one job is in flight at a time. Training never blocks on any of this; it
//! keeps stepping against the old index while the worker runs.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use crate::ann::IndexSnapshot;
use crate::corpus::KnowledgeBase;
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::refresh::{run_cycle, FaultPlan, RefreshConfig, StatusBoard};

/// Where the worker gets parameter snapshots from. A cycle asks once at its
/// start and uses that snapshot throughout. `None` means the producer is
/// gone and the worker should wind down.
pub trait ParamsSource: Send + Sync {
    fn snapshot(&self) -> Option<Arc<EncoderParams>>;
}

/// A single-slot [`ParamsSource`]: `publish` overwrites, `snapshot` clones.
pub struct ParamsSlot {
    slot: RwLock<Arc<EncoderParams>>,
}

impl ParamsSlot {
    pub fn new(initial: Arc<EncoderParams>) -> Self {
        ParamsSlot {
            slot: RwLock::new(initial),
        }
    }

    pub fn publish(&self, params: Arc<EncoderParams>) {
        *self.slot.write() = params;
    }
}

impl ParamsSource for ParamsSlot {
    fn snapshot(&self) -> Option<Arc<EncoderParams>> {
        Some(self.slot.read().clone())
    }
}

/// On-demand [`ParamsSource`]: the worker raises a request, the training
/// thread answers it at the next step boundary with [`service`]
/// (Self::service). Parameters are copied only when a cycle actually asks,
/// never every step.
#[derive(Default)]
pub struct ParamsBoard {
    wanted: AtomicBool,
    slot: Mutex<Option<Arc<EncoderParams>>>,
    closed: AtomicBool,
}

impl ParamsBoard {
    pub fn new() -> Self {
        ParamsBoard::default()
    }

    /// Answers an outstanding snapshot request, if any. Call after every
    /// parameter update.
    pub fn service(&self, params: &EncoderParams) {
        if self.wanted.swap(false, Ordering::SeqCst) {
            *self.slot.lock() = Some(Arc::new(params.clone()));
        }
    }

    /// No more snapshots will ever be produced.
    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}

impl ParamsSource for ParamsBoard {
    fn snapshot(&self) -> Option<Arc<EncoderParams>> {
        self.wanted.store(true, Ordering::SeqCst);
        loop {
            if let Some(p) = self.slot.lock().take() {
                return Some(p);
            }
            if self.closed.load(Ordering::SeqCst) {
                return None;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }
}

/// Emitted once per committed swap; carries everything needed to audit the
/// cycle afterwards (notably the exact parameter snapshot it encoded with).
pub struct JobReport {
    pub job_id: u64,
    pub version: u64,
    pub retries: u32,
    pub params: Arc<EncoderParams>,
    pub snapshot: Arc<IndexSnapshot>,
    pub swapped_at_step: u64,
}

struct PendingJob {
    job_id: u64,
    retries: u32,
    params: Arc<EncoderParams>,
    snapshot: IndexSnapshot,
}

struct Shared {
    handle: Arc<super::IndexHandle>,
    status: Arc<StatusBoard>,
    pending: Mutex<Option<PendingJob>>,
    step: Arc<AtomicU64>,
    last_swap_step: AtomicU64,
    stop: AtomicBool,
}

/// Owns the worker thread. Create with [`spawn`](Self::spawn), call
/// [`try_commit`](Self::try_commit) at every step boundary, and
/// [`shutdown`](Self::shutdown) when training ends. An uncommitted pending
/// snapshot is discarded at shutdown; the last committed index stays.
pub struct BackgroundRefresher {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
    reports: Receiver<JobReport>,
    reports_tx: Sender<JobReport>,
}

impl BackgroundRefresher {
    pub fn spawn(
        kb: Arc<KnowledgeBase>,
        source: Arc<dyn ParamsSource>,
        handle: Arc<super::IndexHandle>,
        status: Arc<StatusBoard>,
        config: RefreshConfig,
        faults: Arc<FaultPlan>,
        step: Arc<AtomicU64>,
    ) -> Self {
        let shared = Arc::new(Shared {
            handle,
            status,
            pending: Mutex::new(None),
            step,
            last_swap_step: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        });
        let (tx, rx) = std::sync::mpsc::channel();
        let worker = {
            let shared = shared.clone();
            std::thread::spawn(move || worker_loop(&kb, &*source, &shared, &config, &faults))
        };
        BackgroundRefresher {
            shared,
            worker: Some(worker),
            reports: rx,
            reports_tx: tx,
        }
    }

    /// Installs the pending snapshot if one is ready. Called by the training
    /// thread at a step boundary; returns the new version after a swap.
    pub fn try_commit(&self, step: u64) -> Result<Option<u64>> {
        let Some(job) = self.shared.pending.lock().take() else {
            return Ok(None);
        };
        let version = job.snapshot.version();
        self.shared.handle.swap(job.snapshot)?;
        self.shared.status.set_swapped(version)?;
        self.shared.last_swap_step.store(step, Ordering::SeqCst);
        let report = JobReport {
            job_id: job.job_id,
            version,
            retries: job.retries,
            params: job.params,
            snapshot: self.shared.handle.current(),
            swapped_at_step: step,
        };
        let _ = self.reports_tx.send(report);
        log::info!("refresh job committed: index version {version} at step {step}");
        Ok(Some(version))
    }

    /// Reports for every swap committed so far, in commit order.
    pub fn drain_reports(&self) -> Vec<JobReport> {
        self.reports.try_iter().collect()
    }

    /// True while a cycle is running or a built snapshot awaits commit.
    pub fn job_in_flight(&self) -> bool {
        self.shared.pending.lock().is_some()
    }

    pub fn shutdown(mut self) -> Vec<JobReport> {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(worker) = self.worker.take() {
            worker.join().expect("refresh worker panicked");
        }
        self.drain_reports()
    }
}

impl Drop for BackgroundRefresher {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

fn worker_loop(
    kb: &KnowledgeBase,
    source: &dyn ParamsSource,
    shared: &Shared,
    config: &RefreshConfig,
    faults: &FaultPlan,
) {
    let mut job_id = 0u64;
    while !shared.stop.load(Ordering::SeqCst) {
        let step = shared.step.load(Ordering::SeqCst);
        let since_swap = step.saturating_sub(shared.last_swap_step.load(Ordering::SeqCst));
        let due = step > 0 && since_swap >= config.refresh_every;
        if !due || shared.pending.lock().is_some() {
            std::thread::sleep(Duration::from_millis(1));
            continue;
        }

        job_id += 1;
        let Some(params) = source.snapshot() else {
            return;
        };
        let next_version = shared.handle.version() + 1;
        let mut retries = 0u32;
        loop {
            if shared.stop.load(Ordering::SeqCst) {
                return;
            }
            match run_cycle(kb, &params, next_version, config, &shared.status, faults, job_id) {
                Ok(snapshot) => {
                    *shared.pending.lock() = Some(PendingJob {
                        job_id,
                        retries,
                        params: params.clone(),
                        snapshot,
                    });
                    break;
                }
                Err(e) => {
                    retries += 1;
                    if retries > config.max_retries {
                        log::error!("refresh job {job_id} abandoned after {retries} attempts: {e}");
                        // Push the trigger forward so we do not spin on a
                        // persistently failing cycle.
                        shared.last_swap_step.store(step, Ordering::SeqCst);
                        break;
                    }
                    log::warn!("refresh job {job_id} failed (attempt {retries}), retrying: {e}");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::IndexKind;
    use crate::corpus::{build_knowledge_base, CorpusConfig, DocKind, Document};
    use crate::encoder::{EncoderConfig, Matrix};
    use crate::refresh::{reencode, IndexHandle};

    fn kb(n_docs: usize) -> Arc<KnowledgeBase> {
        let docs: Vec<Document> = (0..n_docs)
            .map(|i| Document {
                doc_id: format!("d{i}"),
                title: format!("topic{i}"),
                body: (0..25).map(|j| format!("w{}", (i * 11 + j) % 60)).collect::<Vec<_>>().join(" "),
                kind: DocKind::Article,
                abstract_text: None,
            })
            .collect();
        Arc::new(
            build_knowledge_base(&docs, vec![], &CorpusConfig::default())
                .unwrap()
                .0,
        )
    }

    fn setup(
        kb: &Arc<KnowledgeBase>,
        config: RefreshConfig,
        faults: Arc<FaultPlan>,
    ) -> (
        Arc<ParamsSlot>,
        Arc<IndexHandle>,
        Arc<StatusBoard>,
        Arc<AtomicU64>,
        BackgroundRefresher,
    ) {
        let enc = EncoderConfig {
            d_feat: 64,
            d_emb: 8,
            d_feat_gen: 32,
            hash_seed: 7,
        };
        let params = Arc::new(EncoderParams::init(enc, kb.vocab.len(), 42));
        let slot = Arc::new(ParamsSlot::new(params.clone()));
        let handle = Arc::new(IndexHandle::new(IndexSnapshot::build_exact(
            reencode(kb, &params, 0, 1).unwrap(),
        )));
        let status = Arc::new(StatusBoard::new(0));
        let step = Arc::new(AtomicU64::new(0));
        let refresher = BackgroundRefresher::spawn(
            kb.clone(),
            slot.clone() as Arc<dyn ParamsSource>,
            handle.clone(),
            status.clone(),
            config,
            faults,
            step.clone(),
        );
        (slot, handle, status, step, refresher)
    }

    fn perturbed(params: &EncoderParams, eps: f64) -> Arc<EncoderParams> {
        let mut p = params.clone();
        let w = Matrix {
            rows: p.w_p.rows,
            cols: p.w_p.cols,
            data: p.w_p.data.iter().map(|x| x + eps).collect(),
        };
        p.w_p = w;
        Arc::new(p)
    }

    /// Drives fake steps until a commit happens or the deadline passes.
    fn drive_until_commit(
        step: &AtomicU64,
        refresher: &BackgroundRefresher,
        max_steps: u64,
    ) -> Option<u64> {
        for _ in 0..max_steps {
            let s = step.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(v) = refresher.try_commit(s).unwrap() {
                return Some(v);
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        None
    }

    #[test]
    fn params_board_hands_out_serviced_snapshots_and_closes_cleanly() {
        let kb = kb(3);
        let enc = EncoderConfig {
            d_feat: 32,
            d_emb: 4,
            d_feat_gen: 16,
            hash_seed: 3,
        };
        let params = EncoderParams::init(enc, kb.vocab.len(), 5);
        let board = Arc::new(ParamsBoard::new());

        let asker = {
            let board = board.clone();
            std::thread::spawn(move || board.snapshot())
        };
        // Service until the request lands (the asker sets the flag first).
        let got = loop {
            board.service(&params);
            if asker.is_finished() {
                break asker.join().unwrap();
            }
            std::thread::sleep(Duration::from_micros(100));
        };
        assert_eq!(*got.unwrap(), params);

        board.close();
        assert!(board.snapshot().is_none(), "closed board yields no snapshot");
    }

    #[test]
    fn background_cycle_commits_at_a_step_boundary() {
        let kb = kb(30);
        let config = RefreshConfig {
            refresh_every: 5,
            n_workers: 2,
            n_shards: 4,
            index_kind: IndexKind::Exact,
            ..RefreshConfig::default()
        };
        let (slot, handle, status, step, refresher) = setup(&kb, config, Arc::new(FaultPlan::none()));
        // Publish a changed snapshot so the new version differs from v0.
        slot.publish(perturbed(&slot.snapshot().unwrap(), 0.01));

        let v = drive_until_commit(&step, &refresher, 3000).expect("no commit within deadline");
        assert_eq!(v, 1);
        assert_eq!(handle.version(), 1);
        assert_eq!(status.snapshot().current_version, 1);

        let reports = refresher.shutdown();
        assert_eq!(reports.len(), 1);
        let report = &reports[0];
        assert_eq!(report.version, 1);
        assert_eq!(report.retries, 0);
        // The committed matrix is exactly a synchronous re-encode under the
        // snapshot the job claims it used.
        let sync = reencode(&kb, &report.params, 1, 1).unwrap();
        assert_eq!(&report.snapshot.embeddings, &sync);
        assert_eq!(report.snapshot.params_hash(), report.params.w_p_hash());
    }

    #[test]
    fn worker_crash_leaves_old_version_then_retry_succeeds() {
        let kb = kb(20);
        let config = RefreshConfig {
            refresh_every: 3,
            n_workers: 2,
            n_shards: 4,
            max_retries: 2,
            index_kind: IndexKind::Exact,
            ..RefreshConfig::default()
        };
        let faults = Arc::new(FaultPlan::fail_shard(2, 1));
        let (_slot, handle, _status, step, refresher) = setup(&kb, config, faults);

        let v = drive_until_commit(&step, &refresher, 3000).expect("retry should commit");
        assert_eq!(v, 1, "exactly one new version despite the crash");
        assert_eq!(handle.version(), 1);

        let reports = refresher.shutdown();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].retries, 1, "first attempt crashed, second succeeded");
    }

    #[test]
    fn no_commit_before_the_trigger() {
        let kb = kb(10);
        let config = RefreshConfig {
            refresh_every: 1000,
            n_workers: 1,
            n_shards: 2,
            index_kind: IndexKind::Exact,
            ..RefreshConfig::default()
        };
        let (_slot, handle, _status, step, refresher) = setup(&kb, config, Arc::new(FaultPlan::none()));
        for s in 1..=20 {
            step.store(s, Ordering::SeqCst);
            assert_eq!(refresher.try_commit(s).unwrap(), None);
            std::thread::sleep(Duration::from_millis(1));
        }
        assert_eq!(handle.version(), 0);
        assert!(refresher.shutdown().is_empty());
    }

    #[test]
    fn successive_cycles_increment_versions() {
        let kb = kb(15);
        let config = RefreshConfig {
            refresh_every: 2,
            n_workers: 2,
            n_shards: 3,
            index_kind: IndexKind::Exact,
            ..RefreshConfig::default()
        };
        let (slot, handle, _status, step, refresher) = setup(&kb, config, Arc::new(FaultPlan::none()));
        let base = slot.snapshot().unwrap();
        let mut committed = Vec::new();
        for round in 0..3 {
            slot.publish(perturbed(&base, 0.001 * (round + 1) as f64));
            let v = drive_until_commit(&step, &refresher, 3000).expect("commit");
            committed.push(v);
        }
        assert_eq!(committed, vec![1, 2, 3]);
        assert_eq!(handle.version(), 3);
        let reports = refresher.shutdown();
        assert_eq!(
            reports.iter().map(|r| r.version).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        // Each report's matrix reproduces under its own snapshot.
        for r in &reports {
            let sync = reencode(&kb, &r.params, r.version, 1).unwrap();
            assert_eq!(&r.snapshot.embeddings, &sync);
        }
    }
}

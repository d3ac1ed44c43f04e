//! Training loops: the marginalized-loss step with optional index refresh,
//! contrastive retriever pretraining, checkpointing, and epoch scheduling.
//!
//! Two modes share the same step:
//!
//! - **frozen**: the passage tower receives no updates, refresh stays off,
//!   and retrieval runs against the initial index for the whole run.
//! - **end2end**: all three matrices train, and the index is periodically
//!   re-encoded and re-indexed from the moving passage tower — either
//!   in-line at exact step boundaries (`sync`, fully deterministic) or on a
//!   background thread whose finished snapshots are committed at the next
//!   step boundary (`async`).
//!
//! Batches interleave question-answering and statement-reconstruction
//! examples one-to-one; an epoch ends when either stream runs out. Epoch
//! shuffles are seeded functionally (`seed`, `epoch`) so any rerun of the
//! same configuration reproduces the same schedule with no carried RNG
//! state. The per-step metrics log carries no timestamps for the same
//! reason: two identical sync runs must produce byte-identical logs.

mod adam;

pub use adam::{AdamHyper, AdamState};

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::IndexSnapshot;
use crate::corpus::{ExampleKind, KnowledgeBase, PassageId, TrainExample};
use crate::encoder::{similarity, EncoderConfig, EncoderParams, GradAccum};
use crate::error::{Error, Result};
use crate::eval::{exact_match, f1_score, top_k_hit};
use crate::reader::{greedy_decode, sequence_loss_with_grads, LossExample};
use crate::refresh::{
    reencode, run_cycle, BackgroundRefresher, FaultPlan, IndexHandle, ParamsBoard, RefreshConfig,
    StatusBoard,
};
use crate::retriever::{mine_hard_negatives, retrieve, Bm25Index, Bm25Params, RetrieverConfig};
use crate::util::entropy;

const EPOCH_SALT: u64 = 0x9e3779b97f4a7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Passage tower and index stay at initialization.
    Frozen,
    /// Everything trains; the index refreshes.
    End2end,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMode {
    Disabled,
    /// Re-encode in-line at exact step multiples of `refresh_every`.
    Sync,
    /// Re-encode on a background thread; commit at step boundaries.
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub refresh_mode: RefreshMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Candidates retrieved (and marginalized over) per example.
    pub k: usize,
    /// Temperature of the candidate softmax.
    pub tau: f64,
    pub adam: AdamHyper,
    pub seed: u64,
    pub max_decode_len: usize,
    pub encoder: EncoderConfig,
    pub refresh: RefreshConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::End2end,
            refresh_mode: RefreshMode::Async,
            epochs: 10,
            batch_size: 8,
            k: 5,
            tau: 1.0,
            adam: AdamHyper::default(),
            seed: 17,
            max_decode_len: 8,
            encoder: EncoderConfig::default(),
            refresh: RefreshConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Checks every constraint and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.k == 0 {
            problems.push("k must be at least 1".to_string());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            problems.push(format!("tau must be positive and finite, got {}", self.tau));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            problems.push(format!("lr must be positive and finite, got {}", self.adam.lr));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.max_decode_len == 0 {
            problems.push("max_decode_len must be at least 1".to_string());
        }
        if self.refresh.refresh_every == 0 {
            problems.push("refresh_every must be at least 1".to_string());
        }
        if self.refresh.n_workers == 0 || self.refresh.n_shards == 0 {
            problems.push("refresh needs at least one worker and one shard".to_string());
        }
        if self.mode == TrainMode::Frozen && self.refresh_mode != RefreshMode::Disabled {
            problems.push("frozen mode requires refresh_mode = disabled".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Per-step record, also the schema of one `metrics.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub index_version: u64,
    pub doc_entropy: f64,
    #[serde(skip)]
    pub clamped: usize,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything needed to reproduce or continue a run, reloadable bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub adam: AdamState,
    /// Validation exact match, percent.
    pub val_em: f64,
    /// Validation token F1, percent.
    pub val_f1: f64,
    pub kb_digest: String,
    pub index_version: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string(self).expect("checkpoint serializes");
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::CheckpointFormat(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported checkpoint format {} (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// Interleaves the two example streams one-to-one and chunks into batches.
/// With both kinds present the epoch ends when the shorter stream runs out;
/// a single-kind schedule just chunks that stream. The trailing partial
/// batch is kept.
pub fn mix_schedule(qa: &[usize], recon: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let interleaved: Vec<usize> = if recon.is_empty() {
        qa.to_vec()
    } else if qa.is_empty() {
        recon.to_vec()
    } else {
        qa.iter()
            .zip(recon.iter())
            .flat_map(|(&a, &b)| [a, b])
            .collect()
    };
    interleaved
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// The batch schedule for one epoch: both streams shuffled under a seed
/// derived only from `(seed, epoch)`, then interleaved.
pub fn epoch_schedule(
    examples: &[TrainExample],
    seed: u64,
    epoch: usize,
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut qa: Vec<usize> = Vec::new();
    let mut recon: Vec<usize> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match ex.kind {
            ExampleKind::Qa => qa.push(i),
            ExampleKind::Recon => recon.push(i),
        }
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(EPOCH_SALT));
    qa.shuffle(&mut rng);
    recon.shuffle(&mut rng);
    mix_schedule(&qa, &recon, batch_size)
}

/// Contrastive retriever loss for one example: cross-entropy of the
/// positive against the union of positive and negatives under inner-product
/// scores. Gradients for both towers land in `grads`.
pub fn dpr_contrastive_step(
    params: &EncoderParams,
    kb: &KnowledgeBase,
    query_tokens: &[String],
    positive: PassageId,
    negatives: &[PassageId],
    grads: &mut GradAccum,
) -> Result<f64> {
    if let Some(&dup) = negatives.iter().find(|&&n| n == positive) {
        return Err(Error::PositiveAmongNegatives(dup));
    }
    if query_tokens.is_empty() {
        return Err(Error::InvalidConfig("contrastive step with empty query".into()));
    }
    let hasher = params.hasher();
    let phi_q = hasher.featurize(query_tokens);
    let q_vec = params.w_q.transpose_apply(&phi_q);

    let mut ids = Vec::with_capacity(1 + negatives.len());
    ids.push(positive);
    ids.extend_from_slice(negatives);
    let mut phis = Vec::with_capacity(ids.len());
    let mut p_vecs = Vec::with_capacity(ids.len());
    let mut scores = Vec::with_capacity(ids.len());
    for &id in &ids {
        let phi = hasher.featurize(&kb.passage(id)?.full_tokens());
        let p_vec = params.w_p.transpose_apply(&phi);
        scores.push(similarity(&q_vec, &p_vec));
        phis.push(phi);
        p_vecs.push(p_vec);
    }

    // loss = logsumexp(scores) − score₀, computed stably.
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let loss = lse - scores[0];

    // d/ds_j = softmax_j − [j == 0].
    let mut d_scores: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    d_scores[0] -= 1.0;

    let d_emb = q_vec.len();
    let mut d_q = vec![0.0; d_emb];
    for (j, p_vec) in p_vecs.iter().enumerate() {
        for (slot, &pj) in d_q.iter_mut().zip(p_vec) {
            *slot += d_scores[j] * pj;
        }
    }
    grads.add_w_q(&phi_q, &d_q);

    let mut d_p = vec![0.0; d_emb];
    for (j, phi) in phis.iter().enumerate() {
        for (slot, &qj) in d_p.iter_mut().zip(&q_vec) {
            *slot = d_scores[j] * qj;
        }
        grads.add_w_p(phi, &d_p);
    }
    grads.n_examples += 1;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DprConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Lexical hard negatives mined per example.
    pub n_hard_negatives: usize,
    pub adam: AdamHyper,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for DprConfig {
    fn default() -> Self {
        DprConfig {
            epochs: 10,
            batch_size: 8,
            n_hard_negatives: 1,
            adam: AdamHyper::default(),
            seed: 17,
            encoder: EncoderConfig::default(),
        }
    }
}

pub struct DprReport {
    pub params: EncoderParams,
    /// Hash of the freshly initialized parameters, before any update —
    /// lets comparison harnesses verify that every scenario started from
    /// the same initialization.
    pub init_params_hash: String,
    pub epoch_losses: Vec<f64>,
    pub skipped_examples: usize,
}

/// Standalone contrastive training of the two towers: each question against
/// its gold passage versus mined lexical negatives plus the other gold
/// passages in the batch. The generator matrix is initialized but untouched.
pub fn run_dpr_training(
    kb: &KnowledgeBase,
    examples: &[TrainExample],
    config: &DprConfig,
) -> Result<DprReport> {
    let params = EncoderParams::init(config.encoder.clone(), kb.vocab.len(), config.seed);
    run_dpr_training_from(kb, params, examples, config)
}

/// Contrastive tower training starting from caller-supplied parameters, so
/// comparisons can share one initialization across training styles.
pub fn run_dpr_training_from(
    kb: &KnowledgeBase,
    initial: EncoderParams,
    examples: &[TrainExample],
    config: &DprConfig,
) -> Result<DprReport> {
    let mut params = initial;
    let init_params_hash = params.params_hash();
    let mut adamst = AdamState::zeros_like(&params);
    let bm25 = Bm25Index::build(kb, &Bm25Params::default());

    // Usable examples and their mined negatives, fixed for the whole run.
    let mut usable: Vec<(usize, PassageId, Vec<PassageId>)> = Vec::new();
    let mut skipped = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        let Some(gold) = ex.gold_passage_id else {
            skipped += 1;
            continue;
        };
        if ex.kind != ExampleKind::Qa {
            skipped += 1;
            continue;
        }
        let mined = mine_hard_negatives(
            &ex.query_tokens(),
            &ex.target_tokens(),
            kb,
            &bm25,
            config.n_hard_negatives,
        )?;
        let negs: Vec<PassageId> = mined.ids.into_iter().filter(|&n| n != gold).collect();
        usable.push((i, gold, negs));
    }
    if skipped > 0 {
        log::warn!("contrastive pretraining skipped {skipped} examples without a usable gold passage");
    }
    if usable.is_empty() {
        return Err(Error::InvalidConfig(
            "contrastive pretraining needs question examples with gold passages".into(),
        ));
    }

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64 + 1).wrapping_mul(EPOCH_SALT));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut n_steps = 0usize;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = GradAccum::zeros_like(&params);
            let mut batch_loss = 0.0;
            for &slot in batch {
                let (ex_idx, gold, hard) = &usable[slot];
                // In-batch negatives: the other examples' gold passages.
                let mut negatives = hard.clone();
                for &other in batch {
                    let other_gold = usable[other].1;
                    if other != slot && other_gold != *gold && !negatives.contains(&other_gold) {
                        negatives.push(other_gold);
                    }
                }
                batch_loss += dpr_contrastive_step(
                    &params,
                    kb,
                    &examples[*ex_idx].query_tokens(),
                    *gold,
                    &negatives,
                    &mut grads,
                )?;
            }
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: adamst.t + 1,
                    detail: format!("contrastive batch loss {mean}"),
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            adamst.apply(&mut params, &grads, &config.adam, true);
            epoch_loss += mean;
            n_steps += 1;
        }
        epoch_losses.push(epoch_loss / n_steps as f64);
    }
    Ok(DprReport {
        params,
        init_params_hash,
        epoch_losses,
        skipped_examples: skipped,
    })
}

enum RefreshDriver {
    Disabled,
    Sync {
        job_id: u64,
    },
    Async {
        refresher: BackgroundRefresher,
        board: Arc<ParamsBoard>,
        step_counter: Arc<AtomicU64>,
    },
}

/// Owns the model, optimizer, index handle, and refresh machinery for one
/// run. Tests and the epoch loop drive it one batch at a time.
pub struct Trainer {
    pub config: TrainConfig,
    pub kb: Arc<KnowledgeBase>,
    pub params: EncoderParams,
    pub adam: AdamState,
    pub handle: Arc<IndexHandle>,
    pub status: Arc<StatusBoard>,
    step: u64,
    driver: RefreshDriver,
    metrics: Option<std::io::BufWriter<std::fs::File>>,
}

impl Trainer {
    /// Fresh parameters from the config seed, index built at version 0.
    pub fn new(kb: Arc<KnowledgeBase>, config: TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        let params = EncoderParams::init(config.encoder.clone(), kb.vocab.len(), config.seed);
        Self::with_params(kb, config, params, out_dir)
    }

    /// Starts from the given parameters (for pretrained towers); optimizer
    /// state and the step counter start at zero either way.
    pub fn with_params(
        kb: Arc<KnowledgeBase>,
        config: TrainConfig,
        params: EncoderParams,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if config.k > kb.len() {
            return Err(Error::KOutOfRange {
                k: config.k,
                len: kb.len(),
            });
        }
        let initial = reencode(&kb, &params, 0, config.refresh.n_workers)?;
        let snapshot = IndexSnapshot::build(initial, config.refresh.index_kind, &config.refresh.hnsw);
        let handle = Arc::new(IndexHandle::new(snapshot));
        let mut status = StatusBoard::new(0);
        if let Some(dir) = out_dir {
            status = status.with_file(dir.join("refresh_status.json"));
        }
        let status = Arc::new(status);

        let metrics = match out_dir {
            Some(dir) => {
                let path = dir.join("metrics.jsonl");
                let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
                Some(std::io::BufWriter::new(file))
            }
            None => None,
        };

        let adam = AdamState::zeros_like(&params);
        let driver = match config.refresh_mode {
            RefreshMode::Disabled => RefreshDriver::Disabled,
            RefreshMode::Sync => RefreshDriver::Sync { job_id: 0 },
            RefreshMode::Async => {
                let board = Arc::new(ParamsBoard::new());
                let step_counter = Arc::new(AtomicU64::new(0));
                let refresher = BackgroundRefresher::spawn(
                    kb.clone(),
                    board.clone(),
                    handle.clone(),
                    status.clone(),
                    config.refresh.clone(),
                    Arc::new(FaultPlan::none()),
                    step_counter.clone(),
                );
                RefreshDriver::Async {
                    refresher,
                    board,
                    step_counter,
                }
            }
        };

        Ok(Trainer {
            config,
            kb,
            params,
            adam,
            handle,
            status,
            step: 0,
            driver,
            metrics,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimization step over a batch: retrieve per example against the
    /// current index snapshot, accumulate marginalized-loss gradients,
    /// apply the optimizer, then give the refresh machinery its turn at the
    /// step boundary.
    pub fn step_batch(&mut self, batch: &[&TrainExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let snapshot = self.handle.current();
        let retr_cfg = RetrieverConfig {
            k: self.config.k,
            tau: self.config.tau,
        };
        let mut grads = GradAccum::zeros_like(&self.params);
        let mut total_nll = 0.0;
        let mut total_entropy = 0.0;
        let mut clamped = 0usize;
        for ex in batch {
            let query = ex.query_tokens();
            let target = ex.target_tokens();
            let retrieved = retrieve(&query, &self.kb, &snapshot, &self.params, &retr_cfg)?;
            let loss = sequence_loss_with_grads(
                &self.params,
                &self.kb,
                &LossExample {
                    kind: ex.kind,
                    query_tokens: &query,
                    target_tokens: &target,
                    candidates: &retrieved.candidate_ids,
                    tau: self.config.tau,
                },
                &mut grads,
            )?;
            total_nll += loss.nll;
            total_entropy += entropy(&loss.doc_probs);
            clamped += loss.clamped;
        }
        let n = batch.len() as f64;
        let mean_loss = total_nll / n;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                detail: format!("batch mean loss {mean_loss}"),
            });
        }
        grads.scale(1.0 / n);
        self.adam.apply(
            &mut self.params,
            &grads,
            &self.config.adam,
            self.config.mode == TrainMode::End2end,
        );
        self.step += 1;

        match &mut self.driver {
            RefreshDriver::Disabled => {}
            RefreshDriver::Sync { job_id } => {
                if self.step % self.config.refresh.refresh_every == 0 {
                    *job_id += 1;
                    let next_version = self.handle.version() + 1;
                    let snap = run_cycle(
                        &self.kb,
                        &self.params,
                        next_version,
                        &self.config.refresh,
                        &self.status,
                        &FaultPlan::none(),
                        *job_id,
                    )?;
                    self.handle.swap(snap)?;
                    self.status.set_swapped(next_version)?;
                }
            }
            RefreshDriver::Async {
                refresher,
                board,
                step_counter,
            } => {
                step_counter.store(self.step, Ordering::SeqCst);
                board.service(&self.params);
                refresher.try_commit(self.step)?;
            }
        }

        let stats = StepStats {
            step: self.step,
            loss: mean_loss,
            index_version: self.handle.version(),
            doc_entropy: total_entropy / n,
            clamped,
        };
        if let Some(w) = &mut self.metrics {
            let line = serde_json::to_string(&stats).expect("stats serialize");
            writeln!(w, "{line}").map_err(|e| Error::io("metrics.jsonl".to_string(), e))?;
        }
        Ok(stats)
    }

    /// Validation pass with the current parameters and index: greedy decode
    /// against retrieved candidates scored as exact match and token F1,
    /// plus answer-in-candidates retrieval accuracy (all percent).
    pub fn score_validation(&self, examples: &[TrainExample]) -> Result<ValidationScores> {
        if examples.is_empty() {
            return Err(Error::InvalidConfig("empty validation set".into()));
        }
        let snapshot = self.handle.current();
        let retr_cfg = RetrieverConfig {
            k: self.config.k,
            tau: self.config.tau,
        };
        let mut em_sum = 0.0;
        let mut f1_sum = 0.0;
        let mut hits = 0usize;
        for ex in examples {
            let query = ex.query_tokens();
            let retrieved = retrieve(&query, &self.kb, &snapshot, &self.params, &retr_cfg)?;
            let passages = retrieved
                .candidate_ids
                .iter()
                .map(|&id| self.kb.passage(id))
                .collect::<Result<Vec<_>>>()?;
            hits += usize::from(top_k_hit(&ex.target, passages, self.config.k));
            let decoded = greedy_decode(
                &self.params,
                &self.kb,
                ex.kind,
                &query,
                &retrieved.candidate_ids,
                &retrieved.doc_probs,
                self.config.max_decode_len,
            )?;
            let pred = decoded.join(" ");
            em_sum += f64::from(exact_match(&pred, &ex.target));
            f1_sum += f1_score(&pred, &ex.target);
        }
        let n = examples.len() as f64;
        Ok(ValidationScores {
            em: 100.0 * em_sum / n,
            f1: 100.0 * f1_sum / n,
            top_k: 100.0 * hits as f64 / n,
        })
    }

    fn checkpoint(&self, epoch: usize, val_em: f64, val_f1: f64) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            epoch,
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            val_em,
            val_f1,
            kb_digest: self.kb.digest(),
            index_version: self.handle.version(),
        }
    }

    /// Flushes metrics and stops the background worker, if any.
    pub fn finish(mut self) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            w.flush().map_err(|e| Error::io("metrics.jsonl".to_string(), e))?;
        }
        self.metrics = None;
        if let RefreshDriver::Async { board, .. } = &self.driver {
            board.close();
        }
        if let RefreshDriver::Async { refresher, .. } =
            std::mem::replace(&mut self.driver, RefreshDriver::Disabled)
        {
            refresher.shutdown();
        }
        Ok(())
    }
}

impl Drop for Trainer {
    fn drop(&mut self) {
        // Unblock a worker that may be waiting for a parameter snapshot;
        // the refresher's own drop then joins the thread.
        if let RefreshDriver::Async { board, .. } = &self.driver {
            board.close();
        }
    }
}

/// Validation metrics, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub em: f64,
    pub f1: f64,
    /// Answer found among the k retrieved candidates.
    pub top_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_em: f64,
    pub val_f1: f64,
    pub val_top_k: f64,
    pub index_version: u64,
}

pub struct TrainReport {
    pub best: Checkpoint,
    pub epochs: Vec<EpochMetrics>,
}

/// Full training run: `epochs` passes over the mixed schedule, validation
/// after each, best checkpoint selected by highest validation exact match
/// (ties go to the later epoch). With an output directory this writes
/// `metrics.jsonl`, `refresh_status.json`, and the best `checkpoint.json`.
pub fn run_training(
    kb: Arc<KnowledgeBase>,
    train: &[TrainExample],
    valid: &[TrainExample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    run_training_from(kb, None, train, valid, config, out_dir)
}

/// [`run_training`] starting from explicit initial parameters.
pub fn run_training_from(
    kb: Arc<KnowledgeBase>,
    initial: Option<EncoderParams>,
    train: &[TrainExample],
    valid: &[TrainExample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut trainer = match initial {
        Some(params) => Trainer::with_params(kb, config.clone(), params, out_dir)?,
        None => Trainer::new(kb, config.clone(), out_dir)?,
    };
    let mut best: Option<Checkpoint> = None;
    // Selection key for the best checkpoint: exact match first, then validation
    // retrieval quality as the tiebreak so early epochs (EM still zero) keep the
    // checkpoint whose retriever has learned the most. Later epochs win ties.
    let mut best_key: Option<(f64, f64)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let schedule = epoch_schedule(train, config.seed, epoch, config.batch_size);
        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for batch_idx in &schedule {
            let batch: Vec<&TrainExample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let stats = trainer.step_batch(&batch)?;
            loss_sum += stats.loss;
            n_steps += 1;
        }
        let scores = trainer.score_validation(valid)?;
        epochs.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / n_steps.max(1) as f64,
            val_em: scores.em,
            val_f1: scores.f1,
            val_top_k: scores.top_k,
            index_version: trainer.handle.version(),
        });
        log::info!(
            "epoch {epoch}: loss {:.4}, val EM {:.2}%, F1 {:.2}%, top-{} {:.2}%, index v{}",
            loss_sum / n_steps.max(1) as f64,
            scores.em,
            scores.f1,
            config.k,
            scores.top_k,
            trainer.handle.version()
        );
        let candidate_key = (scores.em, scores.top_k);
        if best_key.is_none_or(|k| candidate_key >= k) {
            best_key = Some(candidate_key);
            best = Some(trainer.checkpoint(epoch, scores.em, scores.f1));
        }
    }
    let best = best.expect("at least one epoch ran");
    if let Some(dir) = out_dir {
        best.save(&dir.join("checkpoint.json"))?;
    }
    trainer.finish()?;
    Ok(TrainReport { best, epochs })
}

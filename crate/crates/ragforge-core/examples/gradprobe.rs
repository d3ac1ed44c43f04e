//! Scratch diagnostic for retrieval-gradient dynamics on the synthetic task.
//!
//! Trains end2end with a hand-rolled mirror of the training loop at full
//! task scale, then decomposes what the model actually learned:
//!   * train vs validation NLL (memorization gap),
//!   * NLL with candidates replaced by fixed unrelated passages
//!     (question-side shortcut strength),
//!   * NLL with the gold passage forced into the candidate set
//!     (how much retrieved evidence would help if retrieval worked).

use ragforge_core::ann::{HnswConfig, IndexKind, IndexSnapshot};
use ragforge_core::corpus::{ExampleKind, KnowledgeBase, TrainExample};
use ragforge_core::encoder::{EncoderConfig, EncoderParams, GradAccum};
use ragforge_core::eval::{SyntheticDomainTask, TaskConfig};
use ragforge_core::reader::{sequence_loss, sequence_loss_with_grads, LossExample};
use ragforge_core::refresh::reencode;
use ragforge_core::retriever::{retrieve, RetrieverConfig};
use ragforge_core::trainer::{AdamHyper, AdamState};

fn build_index(kb: &KnowledgeBase, params: &EncoderParams, version: u64) -> IndexSnapshot {
    let emb = reencode(kb, params, version, 1).unwrap();
    IndexSnapshot::build(emb, IndexKind::Exact, &HnswConfig::default())
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn mean_nll(
    params: &EncoderParams,
    kb: &KnowledgeBase,
    index: &IndexSnapshot,
    examples: &[TrainExample],
    retr: &RetrieverConfig,
    candidates_override: Option<&[usize]>,
    force_gold: bool,
) -> f64 {
    let mut sum = 0.0;
    for ex in examples {
        let q = ex.query_tokens();
        let t = ex.target_tokens();
        let cands: Vec<usize> = match candidates_override {
            Some(c) => c.to_vec(),
            None => {
                let mut ids = retrieve(&q, kb, index, params, retr).unwrap().candidate_ids;
                if force_gold {
                    let gold = ex.gold_passage_id.unwrap();
                    if !ids.contains(&gold) {
                        ids[0] = gold;
                    }
                }
                ids
            }
        };
        let loss = sequence_loss(
            params,
            kb,
            &LossExample {
                kind: ex.kind,
                query_tokens: &q,
                target_tokens: &t,
                candidates: &cands,
                tau: retr.tau,
            },
        )
        .unwrap();
        sum += loss.nll;
    }
    sum / examples.len() as f64
}

fn main() {
    let task = SyntheticDomainTask::generate(&TaskConfig {
        mapped_fraction: env_f64("PROBE_MAPPED", 1.0),
        ..TaskConfig::default()
    })
    .unwrap();
    let encoder = EncoderConfig {
        d_feat: 2048,
        d_emb: 32,
        d_feat_gen: 1024,
        hash_seed: 0x5eed,
    };
    let mut params = EncoderParams::init(encoder, task.kb.vocab.len(), 0);
    params.apply_copy_prior(&task.kb.vocab, env_f64("PROBE_COPY", 10.0));
    let hyper = AdamHyper {
        lr: 1e-2,
        lr_gen_scale: env_f64("PROBE_GEN_SCALE", 0.1),
        gen_anchor: env_f64("PROBE_GEN_ANCHOR", 0.1),
        ..AdamHyper::default()
    };
    let tau = 0.5;
    let retr = RetrieverConfig { k: 5, tau };
    let kb = &task.kb;

    let mut adam = AdamState::zeros_like(&params);
    let mut index = build_index(kb, &params, 0);
    let mut step = 0u64;
    let epochs: usize = std::env::var("PROBE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(16);
    for epoch in 0..epochs {
        let mut nll_sum = 0.0;
        let mut attr_hits = 0usize;
        let mut gold_hits = 0usize;
        for chunk in task.train.chunks(4) {
            let mut grads = GradAccum::zeros_like(&params);
            for ex in chunk {
                let q = ex.query_tokens();
                let t = ex.target_tokens();
                let retrieved = retrieve(&q, kb, &index, &params, &retr).unwrap();
                let gold = ex.gold_passage_id.unwrap();
                let (ga, gb) = task.cells[gold];
                if retrieved
                    .candidate_ids
                    .iter()
                    .any(|&c| task.cells[c] == (ga, gb))
                {
                    gold_hits += 1;
                }
                if retrieved
                    .candidate_ids
                    .iter()
                    .any(|&c| task.cells[c].0 == ga || task.cells[c].1 == gb)
                {
                    attr_hits += 1;
                }
                let loss = sequence_loss_with_grads(
                    &params,
                    kb,
                    &LossExample {
                        kind: ex.kind,
                        query_tokens: &q,
                        target_tokens: &t,
                        candidates: &retrieved.candidate_ids,
                        tau,
                    },
                    &mut grads,
                )
                .unwrap();
                nll_sum += loss.nll;
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.apply(&mut params, &grads, &hyper, true);
            step += 1;
            if step % 100 == 0 {
                index = build_index(kb, &params, step);
            }
        }
        // Validation top-5 with fresh towers.
        let fresh = build_index(kb, &params, 100_000 + epoch as u64);
        let mut val_top5 = 0usize;
        for ex in &task.valid {
            let q = ex.query_tokens();
            let r = retrieve(&q, kb, &fresh, &params, &retr).unwrap();
            let cell = task.cells[ex.gold_passage_id.unwrap()];
            if r.candidate_ids.iter().any(|&c| task.cells[c] == cell) {
                val_top5 += 1;
            }
        }
        println!(
            "epoch {epoch:2}  train-loss {:7.4}  attr-in-cands {:5.1}%  cell-in-cands {:4.1}%  val-top5 {:4.1}%",
            nll_sum / task.train.len() as f64,
            100.0 * attr_hits as f64 / task.train.len() as f64,
            100.0 * gold_hits as f64 / task.train.len() as f64,
            100.0 * val_top5 as f64 / task.valid.len() as f64,
        );
    }

    // ---- decomposition ----
    let fresh = build_index(kb, &params, 999_999);
    let fixed: Vec<usize> = vec![17, 431, 1999, 3021, 4400];
    let train_sub = &task.train[..200.min(task.train.len())];
    println!("-- decomposition (mean NLL) --");
    println!(
        "train, own candidates:     {:7.4}",
        mean_nll(&params, kb, &fresh, train_sub, &retr, None, false)
    );
    println!(
        "train, fixed candidates:   {:7.4}",
        mean_nll(&params, kb, &fresh, train_sub, &retr, Some(&fixed), false)
    );
    println!(
        "train, gold forced in:     {:7.4}",
        mean_nll(&params, kb, &fresh, train_sub, &retr, None, true)
    );
    println!(
        "valid, own candidates:     {:7.4}",
        mean_nll(&params, kb, &fresh, &task.valid, &retr, None, false)
    );
    println!(
        "valid, fixed candidates:   {:7.4}",
        mean_nll(&params, kb, &fresh, &task.valid, &retr, Some(&fixed), false)
    );
    println!(
        "valid, gold forced in:     {:7.4}",
        mean_nll(&params, kb, &fresh, &task.valid, &retr, None, true)
    );
}

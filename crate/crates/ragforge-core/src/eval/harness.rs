//! Checkpoint evaluation and the multi-scenario comparison harness.
//!
//! [`evaluate`] scores one trained checkpoint on a held-out question split:
//! greedy-decoded answers against exact match and token F1, and retrieval
//! against Top-5/Top-20 answer-in-passage accuracy. It refuses to run if
//! the knowledge base or the index disagrees with the checkpoint (digest
//! checks), since retrieval numbers are meaningless against artifacts the
//! model never trained on.
//!
//! [`run_comparison`] trains the standard five scenarios — passage tower
//! frozen or trained end to end, with or without the reconstruction
//! signal, plus a standalone contrastively pretrained retriever — from the
//! same per-seed data and parameter initialization (hash-verified), and
//! collects their reports into one table.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ann::IndexSnapshot;
use crate::corpus::{ExampleKind, KnowledgeBase, Passage, TrainExample};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::task::{SyntheticDomainTask, TaskConfig};
use crate::eval::{exact_match, f1_score, top_k_hit};
use crate::reader::greedy_decode;
use crate::refresh::reencode;
use crate::retriever::{retrieve, RetrieverConfig};
use crate::trainer::{
    run_dpr_training_from, run_training_from, Checkpoint, DprConfig, RefreshMode, TrainConfig,
    TrainMode,
};
use crate::util::sha256_hex;

/// Answers are matched against passage title plus body; recorded in every
/// report so consumers know the matching rule.
pub const MATCH_SCOPE: &str = "title+body";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Exact match, percent of examples.
    pub em: f64,
    /// Mean token F1, percent.
    pub f1: f64,
    /// Answer found in the top 5 retrieved passages, percent.
    pub top5: f64,
    /// Answer found in the top 20 retrieved passages, percent.
    pub top20: f64,
    pub n_examples: usize,
    /// Digest of the training configuration that produced the checkpoint.
    pub config_digest: String,
    pub match_scope: String,
}

/// Rebuilds the retrieval index a checkpoint expects: re-encode every
/// passage under the checkpoint's parameters and index per its config.
pub fn index_for_checkpoint(ckpt: &Checkpoint, kb: &KnowledgeBase) -> Result<IndexSnapshot> {
    let emb = reencode(
        kb,
        &ckpt.params,
        ckpt.index_version,
        ckpt.config.refresh.n_workers,
    )?;
    Ok(IndexSnapshot::build(
        emb,
        ckpt.config.refresh.index_kind,
        &ckpt.config.refresh.hnsw,
    ))
}

/// Scores a checkpoint on a question split. Top-5/Top-20 come from one
/// wide retrieval; answers are decoded against the checkpoint's
/// training-time candidate count so generation is scored under the same
/// mixture it was trained with.
pub fn evaluate(
    ckpt: &Checkpoint,
    test: &[TrainExample],
    kb: &KnowledgeBase,
    index: &IndexSnapshot,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test split".into()));
    }
    let kb_digest = kb.digest();
    if kb_digest != ckpt.kb_digest {
        return Err(Error::DigestMismatch {
            context: "knowledge base vs checkpoint".into(),
            expected: ckpt.kb_digest.clone(),
            actual: kb_digest,
        });
    }
    let tower_hash = ckpt.params.w_p_hash();
    if index.params_hash() != tower_hash {
        return Err(Error::DigestMismatch {
            context: "index embeddings vs checkpoint passage tower".into(),
            expected: tower_hash,
            actual: index.params_hash().to_string(),
        });
    }

    let k_wide = 20.min(kb.len());
    let k_decode = ckpt.config.k.min(kb.len());
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut hits5 = 0usize;
    let mut hits20 = 0usize;
    for ex in test {
        if ex.kind != ExampleKind::Qa {
            return Err(Error::InvalidConfig(
                "test split must contain question examples only".into(),
            ));
        }
        let query = ex.query_tokens();
        let wide = retrieve(
            &query,
            kb,
            index,
            &ckpt.params,
            &RetrieverConfig {
                k: k_wide,
                tau: ckpt.config.tau,
            },
        )?;
        let passages: Vec<&Passage> = wide
            .candidate_ids
            .iter()
            .map(|&id| kb.passage(id))
            .collect::<Result<_>>()?;
        hits5 += usize::from(top_k_hit(&ex.target, passages.iter().copied(), 5));
        hits20 += usize::from(top_k_hit(&ex.target, passages.iter().copied(), 20));

        let narrow = retrieve(
            &query,
            kb,
            index,
            &ckpt.params,
            &RetrieverConfig {
                k: k_decode,
                tau: ckpt.config.tau,
            },
        )?;
        let decoded = greedy_decode(
            &ckpt.params,
            kb,
            ex.kind,
            &query,
            &narrow.candidate_ids,
            &narrow.doc_probs,
            ckpt.config.max_decode_len,
        )?;
        let pred = decoded.join(" ");
        let em = exact_match(&pred, &ex.target);
        let f1 = f1_score(&pred, &ex.target);
        assert!(
            !em || (f1 - 1.0).abs() < 1e-12,
            "an exact match must imply full token overlap"
        );
        em_sum += f64::from(em);
        f1_sum += f1;
    }
    let n = test.len() as f64;
    Ok(EvalReport {
        em: 100.0 * em_sum / n,
        f1: 100.0 * f1_sum / n,
        top5: 100.0 * hits5 as f64 / n,
        top20: 100.0 * hits20 as f64 / n,
        n_examples: test.len(),
        config_digest: sha256_hex(
            serde_json::to_string(&ckpt.config)
                .expect("config serializes")
                .as_bytes(),
        ),
        match_scope: MATCH_SCOPE.to_string(),
    })
}

/// The five standard comparison scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Passage tower and index fixed at initialization; question tower and
    /// generator train on questions only.
    FrozenQa,
    /// Everything trains, index refreshes; questions only.
    End2endQa,
    /// Frozen towers with the reconstruction signal mixed in.
    FrozenQaR,
    /// Full training with the reconstruction signal mixed in.
    End2endQaR,
    /// Contrastive retriever pretraining, then a frozen-tower run on top.
    DprStandaloneThenFrozen,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::FrozenQa,
        Scenario::End2endQa,
        Scenario::FrozenQaR,
        Scenario::End2endQaR,
        Scenario::DprStandaloneThenFrozen,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::FrozenQa => "frozen-QA",
            Scenario::End2endQa => "end2end-QA",
            Scenario::FrozenQaR => "frozen-QA+R",
            Scenario::End2endQaR => "end2end-QA+R",
            Scenario::DprStandaloneThenFrozen => "dpr-standalone-then-frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.label().eq_ignore_ascii_case(s.trim()))
    }

    fn uses_recon(self) -> bool {
        matches!(self, Scenario::FrozenQaR | Scenario::End2endQaR)
    }

    fn is_end2end(self) -> bool {
        matches!(self, Scenario::End2endQa | Scenario::End2endQaR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub task: TaskConfig,
    /// Template for every scenario; mode, refresh mode, and seed are
    /// overridden per scenario and per seed.
    pub train: TrainConfig,
    /// Template for the standalone retriever scenario; seed and encoder
    /// are overridden to match the shared initialization.
    pub dpr: DprConfig,
    /// Copy-prior weight folded into the shared initialization's generator
    /// (each token's own output column, see
    /// [`EncoderParams::apply_copy_prior`]). Zero disables it.
    pub copy_prior: f64,
    pub seeds: Vec<u64>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        use crate::ann::IndexKind;
        use crate::encoder::EncoderConfig;
        use crate::refresh::RefreshConfig;
        use crate::trainer::AdamHyper;
        let encoder = EncoderConfig {
            d_feat: 2048,
            d_emb: 32,
            d_feat_gen: 1024,
            hash_seed: 0x5eed,
        };
        ComparisonConfig {
            task: TaskConfig::default(),
            train: TrainConfig {
                mode: TrainMode::End2end,
                refresh_mode: RefreshMode::Sync,
                epochs: 12,
                batch_size: 4,
                k: 5,
                tau: 0.5,
                adam: AdamHyper {
                    lr: 1e-2,
                    lr_gen_scale: 0.1,
                    gen_anchor: 0.1,
                    ..AdamHyper::default()
                },
                seed: 0,
                max_decode_len: 4,
                encoder: encoder.clone(),
                refresh: RefreshConfig {
                    refresh_every: 100,
                    n_workers: 1,
                    n_shards: 4,
                    index_kind: IndexKind::Exact,
                    ..RefreshConfig::default()
                },
            },
            dpr: DprConfig {
                epochs: 12,
                batch_size: 8,
                n_hard_negatives: 1,
                adam: AdamHyper {
                    lr: 3e-3,
                    ..AdamHyper::default()
                },
                seed: 0,
                encoder,
            },
            copy_prior: 10.0,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    pub seed: u64,
    /// Hash of the parameters the scenario started from.
    pub init_params_hash: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ScenarioRow>,
}

impl ComparisonTable {
    pub fn top5(&self, scenario: Scenario, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.seed == seed)
            .map(|r| r.report.top5)
    }

    pub fn mean_top5(&self, scenario: Scenario) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.scenario == scenario)
            .map(|r| r.report.top5)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Fixed-width text table: one row per (scenario, seed), then per-
    /// scenario means.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "scenario", "seed", "EM", "F1", "Top-5", "Top-20"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                r.scenario.label(),
                r.seed,
                r.report.em,
                r.report.f1,
                r.report.top5,
                r.report.top20
            ));
        }
        let mut seen: Vec<Scenario> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.scenario) {
                seen.push(r.scenario);
            }
        }
        out.push('\n');
        for sc in seen {
            let rows: Vec<&ScenarioRow> =
                self.rows.iter().filter(|r| r.scenario == sc).collect();
            let n = rows.len() as f64;
            out.push_str(&format!(
                "{:<28} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                sc.label(),
                "mean",
                rows.iter().map(|r| r.report.em).sum::<f64>() / n,
                rows.iter().map(|r| r.report.f1).sum::<f64>() / n,
                rows.iter().map(|r| r.report.top5).sum::<f64>() / n,
                rows.iter().map(|r| r.report.top20).sum::<f64>() / n,
            ));
        }
        out
    }
}

/// Trains every requested scenario on every seed and evaluates each on the
/// same held-out test split. Within a seed, all scenarios see identical
/// data and start from identical parameters, verified by hash.
pub fn run_comparison(
    config: &ComparisonConfig,
    scenarios: &[Scenario],
) -> Result<ComparisonTable> {
    if scenarios.is_empty() {
        return Err(Error::InvalidConfig("no scenarios requested".into()));
    }
    if config.seeds.is_empty() {
        return Err(Error::InvalidConfig("no seeds requested".into()));
    }
    let mut rows = Vec::with_capacity(scenarios.len() * config.seeds.len());
    for &seed in &config.seeds {
        let task = SyntheticDomainTask::generate(&TaskConfig {
            seed,
            ..config.task.clone()
        })?;
        let SyntheticDomainTask {
            kb,
            train,
            valid,
            test,
            recon,
            ..
        } = task;
        let kb = Arc::new(kb);
        let mut init = EncoderParams::init(config.train.encoder.clone(), kb.vocab.len(), seed);
        if config.copy_prior != 0.0 {
            init.apply_copy_prior(&kb.vocab, config.copy_prior);
        }
        let init_hash = init.params_hash();
        let mut qa_r: Vec<TrainExample> = Vec::new();

        for &scenario in scenarios {
            log::info!("training scenario {} with seed {seed}", scenario.label());
            let best = match scenario {
                Scenario::DprStandaloneThenFrozen => {
                    let dpr_cfg = DprConfig {
                        seed,
                        encoder: config.train.encoder.clone(),
                        ..config.dpr.clone()
                    };
                    let dpr = run_dpr_training_from(&kb, init.clone(), &train, &dpr_cfg)?;
                    if dpr.init_params_hash != init_hash {
                        return Err(Error::DigestMismatch {
                            context: "standalone retriever initialization".into(),
                            expected: init_hash,
                            actual: dpr.init_params_hash,
                        });
                    }
                    let tcfg = TrainConfig {
                        mode: TrainMode::Frozen,
                        refresh_mode: RefreshMode::Disabled,
                        seed,
                        ..config.train.clone()
                    };
                    run_training_from(kb.clone(), Some(dpr.params), &train, &valid, &tcfg, None)?
                        .best
                }
                _ => {
                    let tcfg = TrainConfig {
                        mode: if scenario.is_end2end() {
                            TrainMode::End2end
                        } else {
                            TrainMode::Frozen
                        },
                        refresh_mode: if scenario.is_end2end() {
                            RefreshMode::Sync
                        } else {
                            RefreshMode::Disabled
                        },
                        seed,
                        ..config.train.clone()
                    };
                    let set: &[TrainExample] = if scenario.uses_recon() {
                        if qa_r.is_empty() {
                            qa_r = train.iter().chain(&recon).cloned().collect();
                        }
                        &qa_r
                    } else {
                        &train
                    };
                    run_training_from(kb.clone(), Some(init.clone()), set, &valid, &tcfg, None)?
                        .best
                }
            };
            let index = index_for_checkpoint(&best, &kb)?;
            let report = evaluate(&best, &test, &kb, &index)?;
            log::info!(
                "seed {seed} {}: EM {:.1}%, F1 {:.1}%, Top-5 {:.1}%, Top-20 {:.1}%",
                scenario.label(),
                report.em,
                report.f1,
                report.top5,
                report.top20
            );
            rows.push(ScenarioRow {
                scenario,
                seed,
                init_params_hash: init_hash.clone(),
                report,
            });
        }
    }
    Ok(ComparisonTable { rows })
}

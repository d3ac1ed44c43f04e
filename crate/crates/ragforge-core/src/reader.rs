//! The generator ("reader") and the marginalized sequence loss.
//!
//! For one example with query `x`, target tokens `y₁..y_L`, and a candidate
//! set `Z` of retrieved passages, the model scores
//!
//! ```text
//! P(y | x) = ∏ᵢ Σ_{z∈Z} π(z | x) · P(yᵢ | x, z, y₁..yᵢ₋₁)
//! ```
//!
//! where `π = softmax(sim(q, p)/τ)` over the candidates (recomputed from the
//! current parameters, not from the possibly stale index scores, so the
//! question *and* passage towers receive gradients) and the per-passage token
//! distribution is a log-linear model: `softmax(Uᵀ·g)` with `g` the hashed
//! features of the generator context plus the previous target token.
//!
//! The generator context depends on the example kind:
//!
//! - question answering: `question ++ title ++ body`
//! - statement reconstruction: `<p> ++ title ++ body` — the statement itself
//!   is only the retrieval query and the target, never generator input.
//!
//! Targets always get an end-of-sequence token appended; the previous token
//! at position one is begin-of-sequence. The loss is the exact negative
//! log-likelihood, and `sequence_loss_with_grads` produces its analytic
//! gradients for all three parameter matrices (verified elsewhere against
//! central finite differences). Per-position marginals are floored at
//! [`NLL_CLAMP_FLOOR`] to keep the loss finite; floored positions are
//! counted and contribute no gradient.

use crate::corpus::{ExampleKind, KnowledgeBase, Passage, PassageId, EOS_ID, PASSAGE_MARKER_TOKEN};
use crate::encoder::{similarity, EncoderParams, GradAccum, SparseVec};
use crate::error::{Error, Result};
use crate::util::softmax;

/// Lower bound for a per-position marginal inside the log.
pub const NLL_CLAMP_FLOOR: f64 = 1e-300;

const BOS_TOKEN: &str = "<bos>";

/// One example as the loss sees it: retrieval query, generation target, and
/// the candidate passages some index snapshot proposed.
#[derive(Debug, Clone, Copy)]
pub struct LossExample<'a> {
    pub kind: ExampleKind,
    /// Tokens fed to the question tower (the question, or the statement).
    pub query_tokens: &'a [String],
    /// Tokens the generator must produce (end-of-sequence appended inside).
    pub target_tokens: &'a [String],
    pub candidates: &'a [PassageId],
    /// Softmax temperature for the candidate distribution.
    pub tau: f64,
}

/// Forward-pass result of the marginalized loss.
#[derive(Debug, Clone)]
pub struct SequenceLoss {
    /// Total negative log-likelihood over all positions (including eos).
    pub nll: f64,
    /// `π(z | x)` over the candidates, fresh under the given parameters.
    pub doc_probs: Vec<f64>,
    /// `per_candidate[z][i]` = probability candidate `z`'s generator gives
    /// the target token at position `i`.
    pub per_candidate: Vec<Vec<f64>>,
    /// Number of scored positions (`target_tokens.len() + 1`).
    pub n_positions: usize,
    /// Positions whose marginal hit [`NLL_CLAMP_FLOOR`].
    pub clamped: usize,
}

/// Generator context for one (example, passage) pair.
pub fn build_context(kind: ExampleKind, query_tokens: &[String], passage: &Passage) -> Vec<String> {
    let mut ctx = match kind {
        ExampleKind::Qa => query_tokens.to_vec(),
        ExampleKind::Recon => vec![PASSAGE_MARKER_TOKEN.to_string()],
    };
    ctx.extend(passage.full_tokens());
    ctx
}

/// `−Σᵢ ln Σ_z π_z·P[z][i]` with per-position flooring: the pure
/// marginalization, independent of how the probabilities were produced.
/// Returns the loss and the number of floored positions.
pub fn marginal_nll(doc_probs: &[f64], token_probs: &[Vec<f64>]) -> (f64, usize) {
    let n = token_probs.first().map_or(0, Vec::len);
    let mut nll = 0.0;
    let mut clamped = 0;
    for i in 0..n {
        let m: f64 = doc_probs
            .iter()
            .zip(token_probs)
            .map(|(&pi, probs)| pi * probs[i])
            .sum();
        // Only genuine underflow is rescued; a NaN mixture must propagate
        // so callers can abort on a non-finite loss instead of silently
        // training through poisoned parameters.
        let floored = if m.is_nan() { m } else { m.max(NLL_CLAMP_FLOOR) };
        if m < NLL_CLAMP_FLOOR {
            clamped += 1;
        }
        nll -= floored.ln();
    }
    (nll, clamped)
}

struct PositionForward {
    features: SparseVec,
    /// Full softmax over the vocabulary for this (candidate, position).
    dist: Vec<f64>,
}

struct CandidateForward {
    phi: SparseVec,
    p_vec: Vec<f64>,
    positions: Vec<PositionForward>,
}

struct Forward {
    phi_q: SparseVec,
    q_vec: Vec<f64>,
    doc_probs: Vec<f64>,
    candidates: Vec<CandidateForward>,
    target_ids: Vec<u32>,
    marginals: Vec<f64>,
    loss: SequenceLoss,
}

fn forward(params: &EncoderParams, kb: &KnowledgeBase, ex: &LossExample) -> Result<Forward> {
    if ex.candidates.is_empty() {
        return Err(Error::InvalidConfig("loss needs at least one candidate".into()));
    }
    if ex.query_tokens.is_empty() {
        return Err(Error::InvalidConfig("loss needs a non-empty query".into()));
    }
    if ex.target_tokens.is_empty() {
        return Err(Error::InvalidConfig("loss needs a non-empty target".into()));
    }
    if !(ex.tau.is_finite() && ex.tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive and finite, got {}",
            ex.tau
        )));
    }

    let hasher = params.hasher();
    let gen_hasher = params.gen_hasher();
    let phi_q = hasher.featurize(ex.query_tokens);
    let q_vec = params.w_q.transpose_apply(&phi_q);

    // Targets with eos appended; previous-token strings start at bos.
    let mut target_ids: Vec<u32> = ex.target_tokens.iter().map(|t| kb.vocab.id(t)).collect();
    target_ids.push(EOS_ID);
    let n_positions = target_ids.len();
    let mut prevs: Vec<&str> = Vec::with_capacity(n_positions);
    prevs.push(BOS_TOKEN);
    prevs.extend(ex.target_tokens.iter().map(String::as_str));

    let mut scores = Vec::with_capacity(ex.candidates.len());
    let mut cands = Vec::with_capacity(ex.candidates.len());
    for &pid in ex.candidates {
        let passage = kb.passage(pid)?;
        let phi = hasher.featurize(&passage.full_tokens());
        let p_vec = params.w_p.transpose_apply(&phi);
        scores.push(similarity(&q_vec, &p_vec) / ex.tau);

        let context = build_context(ex.kind, ex.query_tokens, passage);
        let mut positions = Vec::with_capacity(n_positions);
        for &prev in &prevs {
            let mut toks: Vec<&str> = context.iter().map(String::as_str).collect();
            toks.push(prev);
            let features = gen_hasher.featurize(&toks);
            let dist = softmax(&params.u.transpose_apply(&features));
            positions.push(PositionForward { features, dist });
        }
        cands.push(CandidateForward { phi, p_vec, positions });
    }
    let doc_probs = softmax(&scores);

    let per_candidate: Vec<Vec<f64>> = cands
        .iter()
        .map(|c| {
            c.positions
                .iter()
                .zip(&target_ids)
                .map(|(pos, &y)| pos.dist[y as usize])
                .collect()
        })
        .collect();
    let (nll, clamped) = marginal_nll(&doc_probs, &per_candidate);
    let marginals: Vec<f64> = (0..n_positions)
        .map(|i| {
            doc_probs
                .iter()
                .zip(&per_candidate)
                .map(|(&pi, probs)| pi * probs[i])
                .sum()
        })
        .collect();

    let loss = SequenceLoss {
        nll,
        doc_probs: doc_probs.clone(),
        per_candidate,
        n_positions,
        clamped,
    };
    Ok(Forward {
        phi_q,
        q_vec,
        doc_probs,
        candidates: cands,
        target_ids,
        marginals,
        loss,
    })
}

/// Marginalized sequence NLL under the current parameters.
pub fn sequence_loss(
    params: &EncoderParams,
    kb: &KnowledgeBase,
    ex: &LossExample,
) -> Result<SequenceLoss> {
    forward(params, kb, ex).map(|f| f.loss)
}

/// Forward pass plus analytic gradients, accumulated into `grads`.
///
/// Floored positions are treated as locally constant: they add nothing to
/// any gradient, exactly matching the clamped loss that is reported.
pub fn sequence_loss_with_grads(
    params: &EncoderParams,
    kb: &KnowledgeBase,
    ex: &LossExample,
    grads: &mut GradAccum,
) -> Result<SequenceLoss> {
    let fwd = forward(params, kb, ex)?;
    let k = fwd.candidates.len();
    let n = fwd.target_ids.len();
    let live: Vec<bool> = fwd.marginals.iter().map(|&m| m >= NLL_CLAMP_FLOOR).collect();
    let n_live: f64 = live.iter().filter(|&&l| l).count() as f64;

    // A_z = Σᵢ P_{z,i} / mᵢ over live positions; the candidate-logit
    // gradient is −π_z·(A_z − n_live)/τ.
    let mut d_score = vec![0.0; k];
    for z in 0..k {
        let mut a = 0.0;
        for i in 0..n {
            if live[i] {
                a += fwd.loss.per_candidate[z][i] / fwd.marginals[i];
            }
        }
        d_score[z] = -fwd.doc_probs[z] * (a - n_live) / ex.tau;
    }

    // Question tower: rank-one φ_q ⊗ (Σ_z ds_z·p_z).
    let d_emb = fwd.q_vec.len();
    let mut d_q_vec = vec![0.0; d_emb];
    for (z, cand) in fwd.candidates.iter().enumerate() {
        for (slot, &pj) in d_q_vec.iter_mut().zip(&cand.p_vec) {
            *slot += d_score[z] * pj;
        }
    }
    grads.add_w_q(&fwd.phi_q, &d_q_vec);

    // Passage tower: one rank-one update per candidate, φ_z ⊗ (ds_z·q).
    let mut d_p_vec = vec![0.0; d_emb];
    for (z, cand) in fwd.candidates.iter().enumerate() {
        for (slot, &qj) in d_p_vec.iter_mut().zip(&fwd.q_vec) {
            *slot = d_score[z] * qj;
        }
        grads.add_w_p(&cand.phi, &d_p_vec);
    }

    // Generator: for each live (candidate, position) the logit gradient is
    // c_{z,i}·(p̂ − onehot(yᵢ)) with c_{z,i} = π_z·P_{z,i}/mᵢ.
    let mut d_logits = vec![0.0; params.vocab_size()];
    for (z, cand) in fwd.candidates.iter().enumerate() {
        for i in 0..n {
            if !live[i] {
                continue;
            }
            let c = fwd.doc_probs[z] * fwd.loss.per_candidate[z][i] / fwd.marginals[i];
            if c == 0.0 {
                continue;
            }
            let pos = &cand.positions[i];
            for (slot, &p) in d_logits.iter_mut().zip(&pos.dist) {
                *slot = c * p;
            }
            d_logits[fwd.target_ids[i] as usize] -= c;
            grads.add_u(&pos.features, &d_logits);
        }
    }

    grads.n_examples += 1;
    Ok(fwd.loss)
}

/// Greedy decoding under fixed candidate probabilities: at each step the
/// next token maximizes the marginal `Σ_z π_z·P(v | z, prefix)`; ties break
/// toward the lowest token id. Stops at end-of-sequence (excluded from the
/// output) or after `max_len` tokens.
pub fn greedy_decode(
    params: &EncoderParams,
    kb: &KnowledgeBase,
    kind: ExampleKind,
    query_tokens: &[String],
    candidates: &[PassageId],
    doc_probs: &[f64],
    max_len: usize,
) -> Result<Vec<String>> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("decode needs at least one candidate".into()));
    }
    if candidates.len() != doc_probs.len() {
        return Err(Error::ShapeMismatch {
            context: "greedy decode".into(),
            expected: format!("{} doc probs", candidates.len()),
            actual: format!("{}", doc_probs.len()),
        });
    }
    let gen_hasher = params.gen_hasher();
    let contexts: Vec<Vec<String>> = candidates
        .iter()
        .map(|&pid| Ok(build_context(kind, query_tokens, kb.passage(pid)?)))
        .collect::<Result<_>>()?;

    let mut out: Vec<String> = Vec::new();
    for _ in 0..max_len {
        let prev = out.last().map_or(BOS_TOKEN, String::as_str);
        let mut marginal = vec![0.0; params.vocab_size()];
        for (context, &pi) in contexts.iter().zip(doc_probs) {
            let mut toks: Vec<&str> = context.iter().map(String::as_str).collect();
            toks.push(prev);
            let dist = softmax(&params.u.transpose_apply(&gen_hasher.featurize(&toks)));
            for (slot, &p) in marginal.iter_mut().zip(&dist) {
                *slot += pi * p;
            }
        }
        let mut best = 0usize;
        for (v, &p) in marginal.iter().enumerate() {
            if p > marginal[best] {
                best = v;
            }
        }
        if best as u32 == EOS_ID {
            break;
        }
        out.push(kb.vocab.token(best as u32).to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_knowledge_base, CorpusConfig, DocKind, Document, TrainExample};
    use crate::encoder::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn word(rng: &mut ChaCha8Rng, pool: usize) -> String {
        format!("w{}", rng.random_range(0..pool))
    }

    fn small_world(seed: u64, n_docs: usize) -> (KnowledgeBase, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs: Vec<Document> = (0..n_docs)
            .map(|i| Document {
                doc_id: format!("d{i}"),
                title: format!("t{i}"),
                body: (0..12).map(|_| word(&mut rng, 30)).collect::<Vec<_>>().join(" "),
                kind: DocKind::Article,
                abstract_text: None,
            })
            .collect();
        // A QA example per doc so question words enter the vocabulary.
        let examples: Vec<TrainExample> = (0..n_docs)
            .map(|i| {
                TrainExample::qa(
                    format!("q{} w{} what", i, i % 30),
                    format!("w{} w{}", i % 30, (i + 7) % 30),
                    Some(i),
                )
            })
            .collect();
        let (kb, _, _) = build_knowledge_base(&docs, examples, &CorpusConfig::default()).unwrap();
        let config = EncoderConfig {
            d_feat: 48,
            d_emb: 6,
            d_feat_gen: 40,
            hash_seed: 0x77,
        };
        let params = EncoderParams::init(config, kb.vocab.len(), seed ^ 0xabc);
        (kb, params)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn context_shapes_follow_example_kind() {
        let (kb, _) = small_world(1, 3);
        let q = toks("which w3 thing");
        let passage = kb.passage(0).unwrap();
        let qa = build_context(ExampleKind::Qa, &q, passage);
        assert_eq!(&qa[..3], q.as_slice());
        assert_eq!(qa[3..], passage.full_tokens()[..]);

        let recon = build_context(ExampleKind::Recon, &q, passage);
        assert_eq!(recon[0], PASSAGE_MARKER_TOKEN);
        assert_eq!(recon[1..], passage.full_tokens()[..]);
        // The statement itself never appears in the reconstruction context.
        assert!(!recon.iter().any(|t| t == "which"));
    }

    #[test]
    fn single_candidate_loss_matches_direct_computation() {
        let (kb, params) = small_world(2, 5);
        let query = toks("q0 w5 what");
        let target = toks("w2 w9");
        let ex = LossExample {
            kind: ExampleKind::Qa,
            query_tokens: &query,
            target_tokens: &target,
            candidates: &[3],
            tau: 1.0,
        };
        let got = sequence_loss(&params, &kb, &ex).unwrap();
        assert_eq!(got.n_positions, 3);
        assert!((got.doc_probs[0] - 1.0).abs() < 1e-15);

        // Independent recomputation: plain per-position cross-entropy of the
        // single candidate, softmax written out longhand.
        let passage = kb.passage(3).unwrap();
        let mut context = query.clone();
        context.extend(passage.full_tokens());
        let gen = params.gen_hasher();
        let mut ids: Vec<u32> = target.iter().map(|t| kb.vocab.id(t)).collect();
        ids.push(EOS_ID);
        let mut prevs = vec!["<bos>".to_string()];
        prevs.extend(target.iter().cloned());
        let mut expect = 0.0;
        for (prev, &y) in prevs.iter().zip(&ids) {
            let mut input = context.clone();
            input.push(prev.clone());
            let logits = params.u.transpose_apply(&gen.featurize(&input));
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            expect -= (logits[y as usize].exp() / denom).ln();
        }
        assert!(
            (got.nll - expect).abs() < 1e-9,
            "marginal loss with one candidate must reduce to its cross-entropy: {} vs {expect}",
            got.nll
        );
    }

    #[test]
    fn marginal_nll_mixture_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.random_range(2..5);
            let n = rng.random_range(1..6);
            let probs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.random_range(0.01..1.0)).collect())
                .collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|r| r / total).collect();

            // Degenerate mixture equals the selected candidate's NLL.
            let mut onehot = vec![0.0; k];
            onehot[1] = 1.0;
            let (pure, _) = marginal_nll(&onehot, &probs);
            let direct: f64 = probs[1].iter().map(|p| -p.ln()).sum();
            assert!((pure - direct).abs() < 1e-12);

            // The mixture NLL sits between the per-position extremes.
            let (mixed, clamped) = marginal_nll(&pi, &probs);
            assert_eq!(clamped, 0);
            let lo: f64 = (0..n)
                .map(|i| -(0..k).map(|z| probs[z][i]).fold(0.0, f64::max).ln())
                .sum();
            let hi: f64 = (0..n)
                .map(|i| -(0..k).map(|z| probs[z][i]).fold(f64::MAX, f64::min).ln())
                .sum();
            assert!(mixed >= lo - 1e-12 && mixed <= hi + 1e-12);
        }
    }

    #[test]
    fn mass_toward_a_pointwise_dominant_candidate_never_raises_the_loss() {
        // When one candidate's conditional dominates every other candidate
        // at every position, shifting candidate probability toward it can
        // only raise each per-position marginal. (Without pointwise
        // dominance this is false in general.)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.random_range(2..5);
            let n = rng.random_range(1..6);
            let mut probs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.random_range(0.01..0.7)).collect())
                .collect();
            for i in 0..n {
                let best = (1..k).map(|z| probs[z][i]).fold(0.0, f64::max);
                probs[0][i] = (best + rng.random_range(0.0..0.2)).min(1.0);
            }
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|r| r / total).collect();

            // Move a fraction of everyone else's mass to candidate 0.
            let eps = rng.random_range(0.0..1.0);
            let mut shifted = pi.clone();
            for z in 1..k {
                let moved = pi[z] * eps;
                shifted[z] -= moved;
                shifted[0] += moved;
            }
            let (before, _) = marginal_nll(&pi, &probs);
            let (after, _) = marginal_nll(&shifted, &probs);
            assert!(
                after <= before + 1e-12,
                "dominant-mass shift raised loss: {before} -> {after}"
            );
        }
    }

    #[test]
    fn clamped_positions_are_counted_and_keep_everything_finite() {
        let probs = vec![vec![1e-320, 0.5], vec![0.0, 0.25]];
        let (nll, clamped) = marginal_nll(&[0.5, 0.5], &probs);
        assert_eq!(clamped, 1);
        assert!(nll.is_finite());

        // Through the full loss: force the first target token's logit so low
        // that its probability underflows for every candidate.
        let (kb, mut params) = small_world(5, 4);
        let y0 = kb.vocab.id("w2") as usize;
        for f in 0..params.u.rows {
            *params.u.at_mut(f, y0) = -1e6;
        }
        let query = toks("q1 w4 what");
        let target = toks("w2 w9");
        let ex = LossExample {
            kind: ExampleKind::Qa,
            query_tokens: &query,
            target_tokens: &target,
            candidates: &[0, 2],
            tau: 1.0,
        };
        let mut grads = GradAccum::zeros_like(&params);
        let loss = sequence_loss_with_grads(&params, &kb, &ex, &mut grads).unwrap();
        assert!(loss.clamped >= 1, "underflowed position should be counted");
        assert!(loss.nll.is_finite());
        for m in [&grads.w_q, &grads.w_p, &grads.u] {
            assert!(m.data.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn first_position_conditions_on_bos() {
        let (kb, params) = small_world(6, 4);
        let query = toks("q2 w8 what");
        let single = |target: &str| {
            let target = toks(target);
            let ex = LossExample {
                kind: ExampleKind::Qa,
                query_tokens: &query,
                target_tokens: &target,
                candidates: &[1],
                tau: 1.0,
            };
            sequence_loss(&params, &kb, &ex).unwrap()
        };
        // Same token scored at position 0 in both runs: identical, because
        // both condition on bos regardless of what follows.
        let a = single("w3 w5");
        let b = single("w3 w11");
        assert_eq!(a.per_candidate[0][0], b.per_candidate[0][0]);
        // Position 1 conditions on the previous target token, so changing
        // that token moves the probability of a shared position-2 target.
        let c = single("w5 w7");
        let d = single("w9 w7");
        assert_ne!(c.per_candidate[0][1], d.per_candidate[0][1]);
    }

    /// Central-difference check of one scalar coordinate.
    fn fd_close(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-6 {
            diff / scale <= 1e-5
        } else {
            diff <= 1e-8
        }
    }

    fn fd_check_matrix(
        params: &EncoderParams,
        kb: &KnowledgeBase,
        ex: &LossExample,
        grad: &crate::encoder::Matrix,
        pick: fn(&mut EncoderParams) -> &mut crate::encoder::Matrix,
        rng: &mut ChaCha8Rng,
        label: &str,
    ) {
        // The largest-gradient coordinates plus random ones (which are
        // often exactly zero for hashed features that never fire).
        let mut coords: Vec<usize> = (0..grad.data.len()).collect();
        coords.sort_by(|&a, &b| grad.data[b].abs().total_cmp(&grad.data[a].abs()));
        let mut sample: Vec<usize> = coords.iter().take(4).copied().collect();
        for _ in 0..4 {
            sample.push(rng.random_range(0..grad.data.len()));
        }
        let h = 1e-5;
        for &j in &sample {
            let mut plus = params.clone();
            pick(&mut plus).data[j] += h;
            let mut minus = params.clone();
            pick(&mut minus).data[j] -= h;
            let lp = sequence_loss(&plus, kb, ex).unwrap();
            let lm = sequence_loss(&minus, kb, ex).unwrap();
            assert_eq!(lp.clamped + lm.clamped, 0, "fd probe must not clamp");
            let numeric = (lp.nll - lm.nll) / (2.0 * h);
            assert!(
                fd_close(grad.data[j], numeric),
                "{label}[{j}]: analytic {} vs numeric {numeric}",
                grad.data[j]
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let (kb, params) = small_world(10 + seed, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (kind, query, target) = if seed % 2 == 0 {
                (ExampleKind::Qa, toks("q3 w4 what"), toks("w1 w6 w2"))
            } else {
                // Reconstruction: the statement is both query and target.
                (ExampleKind::Recon, toks("w3 w8 w1"), toks("w3 w8 w1"))
            };
            let candidates = [0usize, 2, 5, 6];
            let ex = LossExample {
                kind,
                query_tokens: &query,
                target_tokens: &target,
                candidates: &candidates,
                tau: 0.7,
            };
            let mut grads = GradAccum::zeros_like(&params);
            let loss = sequence_loss_with_grads(&params, &kb, &ex, &mut grads).unwrap();
            assert_eq!(loss.clamped, 0);
            assert_eq!(grads.n_examples, 1);

            fd_check_matrix(&params, &kb, &ex, &grads.w_q, |p| &mut p.w_q, &mut rng, "w_q");
            fd_check_matrix(&params, &kb, &ex, &grads.w_p, |p| &mut p.w_p, &mut rng, "w_p");
            fd_check_matrix(&params, &kb, &ex, &grads.u, |p| &mut p.u, &mut rng, "u");
        }
    }

    #[test]
    fn candidate_score_gradient_identity_holds() {
        // Σ_z π_z·A_z = n, so the candidate-logit gradients must sum to
        // zero: a pure translation of all similarity scores cannot change
        // the loss. Checked through finite differences on tau-scaled scores
        // by shifting every passage-tower output the same way is awkward;
        // instead verify directly that Σ_z ds_z = 0 via the chain to q_vec:
        // perturbing q along any direction keeping all scores equal leaves
        // the loss unchanged only if Σ ds_z = 0. We recompute ds from the
        // loss internals.
        let (kb, params) = small_world(21, 6);
        let query = toks("q0 w2 what");
        let target = toks("w5 w1");
        let ex = LossExample {
            kind: ExampleKind::Qa,
            query_tokens: &query,
            target_tokens: &target,
            candidates: &[0, 1, 3],
            tau: 1.3,
        };
        let loss = sequence_loss(&params, &kb, &ex).unwrap();
        let n = loss.n_positions as f64;
        let mut total = 0.0;
        for z in 0..3 {
            let a: f64 = (0..loss.n_positions)
                .map(|i| {
                    let m: f64 = (0..3)
                        .map(|w| loss.doc_probs[w] * loss.per_candidate[w][i])
                        .sum();
                    loss.per_candidate[z][i] / m
                })
                .sum();
            total += loss.doc_probs[z] * a;
        }
        assert!((total - n).abs() < 1e-9, "Σ π_z A_z = n failed: {total} vs {n}");
    }

    #[test]
    fn decode_with_flat_generator_picks_lowest_id_until_max_len() {
        let (kb, mut params) = small_world(30, 4);
        for x in params.u.data.iter_mut() {
            *x = 0.0;
        }
        let query = toks("q0 w1 what");
        let out = greedy_decode(
            &params,
            &kb,
            ExampleKind::Qa,
            &query,
            &[0, 1],
            &[0.5, 0.5],
            4,
        )
        .unwrap();
        // All logits equal → uniform marginal → ties resolve to id 0.
        assert_eq!(out, vec!["<pad>"; 4]);
    }

    #[test]
    fn decode_stops_at_eos_and_can_return_empty() {
        let (kb, mut params) = small_world(31, 4);
        for f in 0..params.u.rows {
            *params.u.at_mut(f, EOS_ID as usize) = 50.0;
        }
        let query = toks("q1 w2 what");
        let out = greedy_decode(
            &params,
            &kb,
            ExampleKind::Qa,
            &query,
            &[0],
            &[1.0],
            8,
        )
        .unwrap();
        assert!(out.is_empty(), "eos-first decode must yield an empty answer");
    }

    #[test]
    fn decode_validates_inputs() {
        let (kb, params) = small_world(32, 3);
        let query = toks("q0 w1 what");
        assert!(matches!(
            greedy_decode(&params, &kb, ExampleKind::Qa, &query, &[], &[], 4),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            greedy_decode(&params, &kb, ExampleKind::Qa, &query, &[0, 1], &[1.0], 4),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn loss_validates_inputs() {
        let (kb, params) = small_world(33, 3);
        let query = toks("q0 w1 what");
        let target = toks("w2");
        let empty: Vec<String> = vec![];
        let base = LossExample {
            kind: ExampleKind::Qa,
            query_tokens: &query,
            target_tokens: &target,
            candidates: &[0],
            tau: 1.0,
        };
        for bad in [
            LossExample { candidates: &[], ..base },
            LossExample { query_tokens: &empty, ..base },
            LossExample { target_tokens: &empty, ..base },
            LossExample { tau: 0.0, ..base },
            LossExample { tau: f64::NAN, ..base },
        ] {
            assert!(sequence_loss(&params, &kb, &bad).is_err());
        }
    }
}

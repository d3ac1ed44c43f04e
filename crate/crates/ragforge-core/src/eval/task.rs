//! Synthetic domain-shift task generator.
//!
//! The corpus is a compositional attribute grid: two attribute vocabularies
//! (`x0..`, `y0..`) whose pairs name grid cells, and every passage realizes
//! one cell. Cells are realized by several passages ("copies") that differ
//! only in filler text, so passages sharing an attribute value with a
//! question's gold cell are common enough for a randomly initialized
//! retriever to stumble onto them — which is what lets joint training
//! bootstrap: partially matching candidates carry a usefulness gradient long
//! before the exact cell is ever retrieved. A passage's body carries three
//! occurrences of its `x` token and three of its `y` token, laid out so the
//! two-token answer string `"x{a} y{b}"` appears contiguously in every copy
//! of cell `(a, b)` and in no other passage.
//!
//! Domain shift comes from a vocabulary permutation: for a configurable
//! fraction of attribute values the permutation transposes the corpus token
//! with a question-dialect token (`x7 ↔ qx7`). Questions are phrased in the
//! permuted vocabulary, so at initialization neither lexical overlap nor a
//! randomly initialized encoder pair can connect a mapped question to its
//! gold cell; retrieval becomes solvable only after the encoders adapt.
//! Reconstruction statements (`x{a} s{j} y{b}`, one per cell) are phrased in
//! the corpus vocabulary — they stand in for statements drawn from the
//! target documents themselves — and never duplicate a passage span, so the
//! corpus builder keeps all of them.
//!
//! Each question names the true attribute value on both axes but adds decoy
//! values on one randomly chosen axis ("which qx3 qx12 qy7 pair"-style).
//! The question alone therefore never determines the answer — a generator
//! cannot learn a question-token → answer-token lookup table that closes the
//! loss on the decoyed position — so the only way to tell the true value
//! from the decoys is evidence in a retrieved passage. That keeps the
//! per-candidate usefulness contrast (and with it the retrieval gradient)
//! alive for the whole run instead of letting a question-only shortcut
//! saturate the objective. Decoys on a single axis keep the plausible set
//! small (two cells), so a retriever that resolves both axes can still place
//! a gold-cell copy in its top few results essentially always.
//!
//! Question/answer pairs are split train/valid/test by *cell*: held-out
//! questions ask about attribute combinations never asked about in training,
//! so answering them requires composing per-axis knowledge rather than
//! recalling a trained question.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_knowledge_base, BuildReport, CorpusConfig, DocKind, Document, KnowledgeBase,
    TrainExample,
};
use crate::error::{Error, Result};

/// Number of distinct connective tokens used in reconstruction statements.
const N_STATEMENT_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub seed: u64,
    pub n_passages: usize,
    /// Total question/answer pairs, split train/valid/test.
    pub n_qa: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Sizes of the two attribute vocabularies. When the grid is smaller
    /// than `n_passages`, cells are realized by multiple filler-varied
    /// copies; when larger, a random subset of cells is realized once each.
    pub n_x: usize,
    pub n_y: usize,
    /// Distinct filler tokens available.
    pub filler_pool: usize,
    /// Filler tokens per passage body.
    pub fillers_per_body: usize,
    /// Fraction of each attribute vocabulary swapped with question-dialect
    /// tokens by the domain permutation.
    pub mapped_fraction: f64,
    /// Decoy attribute values mixed into each question on one randomly
    /// chosen axis alongside the true one. With one decoy a question is
    /// compatible with two grid cells; the answer names the gold cell.
    pub n_decoys: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            n_passages: 5000,
            n_qa: 2000,
            n_valid: 200,
            n_test: 200,
            n_x: 16,
            n_y: 16,
            filler_pool: 100,
            fillers_per_body: 30,
            mapped_fraction: 1.0,
            n_decoys: 1,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_passages == 0 {
            problems.push("n_passages must be at least 1".to_string());
        }
        if self.n_x < 2 || self.n_y < 2 {
            problems.push("n_x and n_y must each be at least 2".to_string());
        }
        if self.n_valid + self.n_test >= self.n_qa {
            problems.push(format!(
                "splits need n_valid + n_test < n_qa, got {} + {} vs {}",
                self.n_valid, self.n_test, self.n_qa
            ));
        }
        // Cells are partitioned across splits proportionally to question
        // counts; each split needs at least one cell of its own.
        let n_cells = self.n_x.saturating_mul(self.n_y).min(self.n_passages);
        if self.n_qa > 0 && split_cell_counts(n_cells, self).is_none() {
            problems.push(format!(
                "{} realized cells cannot be partitioned across train/valid/test",
                n_cells
            ));
        }
        if self.filler_pool == 0 {
            problems.push("filler_pool must be at least 1".to_string());
        }
        if self.fillers_per_body < 6 {
            problems.push("fillers_per_body must be at least 6".to_string());
        }
        if !(0.0..=1.0).contains(&self.mapped_fraction) {
            problems.push(format!(
                "mapped_fraction must lie in [0, 1], got {}",
                self.mapped_fraction
            ));
        }
        if self.n_decoys + 1 > self.n_x.min(self.n_y) {
            problems.push(format!(
                "n_decoys {} needs at least that many alternative values on both axes",
                self.n_decoys
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Cells reserved for the test and valid splits, proportional to their
/// question counts. Returns None when some split would end up empty.
fn split_cell_counts(n_cells: usize, config: &TaskConfig) -> Option<(usize, usize)> {
    let share = |count: usize| -> usize {
        ((n_cells as f64) * (count as f64) / (config.n_qa as f64)).round().max(1.0) as usize
    };
    let (t, v) = (share(config.n_test), share(config.n_valid));
    if t + v >= n_cells {
        None
    } else {
        Some((t, v))
    }
}

/// A generated corpus plus its supervision, ready for the training loops.
pub struct SyntheticDomainTask {
    pub config: TaskConfig,
    pub kb: KnowledgeBase,
    /// Grid cell `(a, b)` realized by each passage, indexed by passage id.
    pub cells: Vec<(usize, usize)>,
    /// Number of distinct realized cells.
    pub n_cells: usize,
    /// Which attribute values the domain permutation maps.
    pub mapped_x: Vec<bool>,
    pub mapped_y: Vec<bool>,
    pub train: Vec<TrainExample>,
    pub valid: Vec<TrainExample>,
    pub test: Vec<TrainExample>,
    /// One reconstruction statement per realized cell.
    pub recon: Vec<TrainExample>,
    pub report: BuildReport,
}

impl SyntheticDomainTask {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        // Realized cells: the whole grid when it fits inside the passage
        // budget, otherwise a random subset realized once each. Passages
        // cycle through the realized cells, so copy counts differ by at
        // most one.
        let mut grid: Vec<(usize, usize)> = (0..config.n_x)
            .flat_map(|a| (0..config.n_y).map(move |b| (a, b)))
            .collect();
        grid.shuffle(&mut rng);
        grid.truncate(config.n_passages);
        let n_cells = grid.len();
        let cells: Vec<(usize, usize)> =
            (0..config.n_passages).map(|i| grid[i % n_cells]).collect();
        let mut copies: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
        for pid in 0..config.n_passages {
            copies[pid % n_cells].push(pid);
        }

        // The domain permutation's support: a seeded sample of each
        // attribute vocabulary.
        let mapped_x = pick_mapped(config.n_x, config.mapped_fraction, &mut rng);
        let mapped_y = pick_mapped(config.n_y, config.mapped_fraction, &mut rng);

        let docs: Vec<Document> = cells
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Document {
                doc_id: format!("syn-{i}"),
                title: "entry".to_string(),
                body: plant_body(a, b, config, &mut rng).join(" "),
                kind: DocKind::Article,
                abstract_text: None,
            })
            .collect();

        // Partition the realized cells across splits, then phrase each
        // split's questions over its own cells (cycling for even coverage).
        // Held-out questions therefore ask about never-trained cells.
        let (n_test_cells, n_valid_cells) =
            split_cell_counts(n_cells, config).expect("validated above");
        let test_cells = 0..n_test_cells;
        let valid_cells = n_test_cells..n_test_cells + n_valid_cells;
        let train_cells = n_test_cells + n_valid_cells..n_cells;
        let n_train = config.n_qa - config.n_valid - config.n_test;

        let mut examples: Vec<TrainExample> = Vec::with_capacity(config.n_qa + n_cells);
        for (cell_range, count) in [
            (train_cells, n_train),
            (valid_cells, config.n_valid),
            (test_cells, config.n_test),
        ] {
            let split: Vec<usize> = cell_range.collect();
            let mut qa: Vec<TrainExample> = (0..count)
                .map(|j| {
                    let ci = split[j % split.len()];
                    let (a, b) = grid[ci];
                    let gold = copies[ci][rng.random_range(0..copies[ci].len())];
                    let question =
                        phrase_question(a, b, &mapped_x, &mapped_y, config, &mut rng);
                    TrainExample::qa(question, format!("x{a} y{b}"), Some(gold))
                })
                .collect();
            qa.shuffle(&mut rng);
            examples.append(&mut qa);
        }

        // One reconstruction statement per realized cell, in corpus
        // vocabulary, with a connective token that appears in no body.
        for (ci, &(a, b)) in grid.iter().enumerate() {
            let gold = copies[ci][rng.random_range(0..copies[ci].len())];
            examples.push(TrainExample::recon(
                format!("x{a} s{} y{b}", (a + b) % N_STATEMENT_TOKENS),
                Some(gold),
            ));
        }

        let (kb, kept, report) = build_knowledge_base(&docs, examples, &CorpusConfig::default())?;
        if kb.len() != config.n_passages {
            return Err(Error::Other(format!(
                "task bodies must chunk one passage per document: got {} passages from {} documents",
                kb.len(),
                config.n_passages
            )));
        }
        if report.recon_duplicates_dropped != 0 || kept.len() != config.n_qa + n_cells {
            return Err(Error::Other(format!(
                "task construction must survive corpus deduplication intact ({} dropped)",
                report.recon_duplicates_dropped
            )));
        }

        let mut qa = kept;
        let recon = qa.split_off(config.n_qa);
        let mut rest = qa.split_off(n_train);
        let test = rest.split_off(config.n_valid);
        Ok(SyntheticDomainTask {
            config: config.clone(),
            kb,
            cells,
            n_cells,
            mapped_x,
            mapped_y,
            train: qa,
            valid: rest,
            test,
            recon,
            report,
        })
    }
}

/// Question text for gold cell `(a, b)`: the true value on both axes, plus
/// `n_decoys` decoy values on one randomly chosen axis, all slots shuffled
/// so position never reveals which value is true.
fn phrase_question(
    a: usize,
    b: usize,
    mapped_x: &[bool],
    mapped_y: &[bool],
    config: &TaskConfig,
    rng: &mut ChaCha8Rng,
) -> String {
    let question_x = |a: usize| if mapped_x[a] { format!("qx{a}") } else { format!("x{a}") };
    let question_y = |b: usize| if mapped_y[b] { format!("qy{b}") } else { format!("y{b}") };
    let decoys_on_x = rng.random_bool(0.5);
    let mut x_slots = vec![a];
    let mut y_slots = vec![b];
    if decoys_on_x {
        x_slots.extend(sample_others(config.n_x, a, config.n_decoys, rng));
        x_slots.shuffle(rng);
    } else {
        y_slots.extend(sample_others(config.n_y, b, config.n_decoys, rng));
        y_slots.shuffle(rng);
    }
    let xs: Vec<String> = x_slots.into_iter().map(question_x).collect();
    let ys: Vec<String> = y_slots.into_iter().map(question_y).collect();
    format!("which {} {} pair", xs.join(" "), ys.join(" "))
}

/// `count` distinct values drawn from `0..n` excluding `exclude`, via a
/// partial Fisher–Yates pass.
fn sample_others(n: usize, exclude: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).filter(|&v| v != exclude).collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count.min(pool.len()) {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

fn pick_mapped(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n_mapped = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mapped = vec![false; n];
    for &v in order.iter().take(n_mapped.min(n)) {
        mapped[v] = true;
    }
    mapped
}

/// Body tokens for a passage realizing grid cell `(a, b)`: six non-empty
/// filler runs interleaved with the five attribute insertions
/// `{x, x, [x y], y, y}` in shuffled order. Every lone `x{a}` is followed
/// by filler and every lone `y{b}` preceded by filler, so `x{a}`
/// immediately followed by `y{b}` occurs exactly once per copy of this
/// cell — passages of other cells carry either a different `x` or a
/// different `y`.
fn plant_body(a: usize, b: usize, config: &TaskConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let x = format!("x{a}");
    let y = format!("y{b}");
    let mut insertions = [
        vec![x.clone()],
        vec![x.clone()],
        vec![x, y.clone()],
        vec![y.clone()],
        vec![y],
    ];
    insertions.shuffle(rng);

    let mut run_lens = [1usize; 6];
    for _ in 0..config.fillers_per_body - 6 {
        run_lens[rng.random_range(0..6)] += 1;
    }

    let mut body = Vec::with_capacity(config.fillers_per_body + 6);
    for (i, &len) in run_lens.iter().enumerate() {
        for _ in 0..len {
            body.push(format!("f{}", rng.random_range(0..config.filler_pool)));
        }
        if i < 5 {
            body.extend(insertions[i].iter().cloned());
        }
    }
    body
}

//! Feature hashing and the dual-encoder / generator parameter set.
//!
//! Text on both towers is represented as L2-normalized hashed token counts.
//! The question tower projects query features through `W_q`, the passage
//! tower projects title+body features through `W_p`, and similarity is the
//! inner product of the two embeddings. The generator scores output tokens
//! through `U` over a separate hashed feature space. Everything is `f64` so
//! analytic gradients can be checked against finite differences tightly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, TokenId, Vocab, FIRST_REGULAR_ID};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;
/// Salt applied to the hash seed for the generator feature space, keeping it
/// decorrelated from the encoder space even at equal dimensions.
const GEN_SEED_SALT: u64 = 0x9e3779b97f4a7c15;

/// Sizing and seeding for [`EncoderParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hashed feature dimension for both encoder towers.
    pub d_feat: usize,
    /// Embedding dimension.
    pub d_emb: usize,
    /// Hashed feature dimension for the generator context.
    pub d_feat_gen: usize,
    /// Seed for the token-to-bucket hash.
    pub hash_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_feat: 4096,
            d_emb: 64,
            d_feat_gen: 4096,
            hash_seed: 0x5eed,
        }
    }
}

/// Sparse vector sorted by index, produced by [`FeatureHasher::featurize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn empty() -> Self {
        SparseVec {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }
}

/// Deterministic seeded token hasher (FNV-1a over the seed bytes then the
/// token bytes, reduced modulo the feature dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHasher {
    pub d_feat: usize,
    pub seed: u64,
}

impl FeatureHasher {
    pub fn new(d_feat: usize, seed: u64) -> Self {
        FeatureHasher { d_feat, seed }
    }

    pub fn bucket(&self, token: &str) -> u32 {
        let mut h = FNV_OFFSET;
        for b in self.seed.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for &b in token.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        (h % self.d_feat as u64) as u32
    }

    /// Hashed token counts, L2-normalized. Colliding tokens accumulate into
    /// the same bucket; an empty token list yields the zero vector.
    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S]) -> SparseVec {
        if tokens.is_empty() {
            return SparseVec::empty();
        }
        let mut counts = std::collections::BTreeMap::<u32, f64>::new();
        for t in tokens {
            *counts.entry(self.bucket(t.as_ref())).or_insert(0.0) += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        let (indices, values) = counts
            .into_iter()
            .map(|(i, c)| (i, c / norm))
            .unzip();
        SparseVec { indices, values }
    }
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Gaussian init via Box-Muller on a seeded stream.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(std * standard_normal(rng));
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `Mᵀ·x` for sparse `x`; the workhorse of both towers.
    pub fn transpose_apply(&self, x: &SparseVec) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, v) in x.iter() {
            let row = self.row(i);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// SHA-256 over dimensions and little-endian element bytes.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + self.data.len() * 8);
        bytes.extend_from_slice(&(self.rows as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    // (0,1] for the log; [0,1) for the angle.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// All trainable parameters: the two encoder towers and the generator
/// output matrix, plus the hashers that define their input spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// Question tower, `d_feat × d_emb`.
    pub w_q: Matrix,
    /// Passage tower, `d_feat × d_emb`. The towers share no weights.
    pub w_p: Matrix,
    /// Generator output embeddings, `d_feat_gen × vocab_size`.
    pub u: Matrix,
}

impl EncoderParams {
    /// Gaussian-initialized parameters with std `1/√d_feat` per tower and
    /// `1/√d_feat_gen` for the generator, drawn from a seeded stream.
    pub fn init(config: EncoderConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_enc = 1.0 / (config.d_feat as f64).sqrt();
        let std_gen = 1.0 / (config.d_feat_gen as f64).sqrt();
        let w_q = Matrix::randn(config.d_feat, config.d_emb, std_enc, &mut rng);
        let w_p = Matrix::randn(config.d_feat, config.d_emb, std_enc, &mut rng);
        let u = Matrix::randn(config.d_feat_gen, vocab_size, std_gen, &mut rng);
        EncoderParams { config, w_q, w_p, u }
    }

    /// Adds a copy prior to the generator: every regular vocabulary token's
    /// generator feature bucket gets weight `scale` on that token's own
    /// output column. A generator initialized this way already places
    /// probability mass on tokens present in its context — the way a reader
    /// pretrained on copy-heavy text does — so from the first step a
    /// candidate passage containing target tokens is measurably more useful
    /// than one that does not, and the retrieval gradient has signal before
    /// any generator learning has happened.
    pub fn apply_copy_prior(&mut self, vocab: &Vocab, scale: f64) {
        let hasher = self.gen_hasher();
        for id in FIRST_REGULAR_ID..vocab.len() as TokenId {
            let row = hasher.bucket(vocab.token(id)) as usize;
            *self.u.at_mut(row, id as usize) += scale;
        }
    }

    pub fn hasher(&self) -> FeatureHasher {
        FeatureHasher::new(self.config.d_feat, self.config.hash_seed)
    }

    pub fn gen_hasher(&self) -> FeatureHasher {
        FeatureHasher::new(self.config.d_feat_gen, self.config.hash_seed ^ GEN_SEED_SALT)
    }

    pub fn vocab_size(&self) -> usize {
        self.u.cols
    }

    /// Question embedding `W_qᵀ·φ(tokens)`.
    pub fn encode_question<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        self.w_q.transpose_apply(&self.hasher().featurize(tokens))
    }

    /// Passage embedding `W_pᵀ·φ(title ++ body)`. The title is prepended
    /// here, at encoding time; it is not stored in the chunk.
    pub fn encode_passage(&self, passage: &Passage) -> Vec<f64> {
        self.encode_passage_tokens(&passage.full_tokens())
    }

    pub fn encode_passage_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        self.w_p.transpose_apply(&self.hasher().featurize(tokens))
    }

    /// Hash of the passage tower; embedding matrices record it so indexes
    /// can prove which parameters produced them.
    pub fn w_p_hash(&self) -> String {
        self.w_p.content_hash()
    }

    /// Hash over all three matrices.
    pub fn params_hash(&self) -> String {
        let mut bytes = Vec::new();
        for m in [&self.w_q, &self.w_p, &self.u] {
            bytes.extend_from_slice(m.content_hash().as_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Inner-product similarity between a question and a passage embedding.
pub fn similarity(q: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(q.len(), p.len());
    q.iter().zip(p).map(|(a, b)| a * b).sum()
}

/// Dense gradient accumulator with the same shapes as [`EncoderParams`].
///
/// Losses deposit rank-one updates (sparse feature vector ⊗ dense backprop
/// vector) here; the optimizer consumes the dense result. `n_examples`
/// counts deposits so a batch can be averaged with [`scale`](Self::scale).
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub w_q: Matrix,
    pub w_p: Matrix,
    pub u: Matrix,
    pub n_examples: usize,
}

impl GradAccum {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradAccum {
            w_q: Matrix::zeros(params.w_q.rows, params.w_q.cols),
            w_p: Matrix::zeros(params.w_p.rows, params.w_p.cols),
            u: Matrix::zeros(params.u.rows, params.u.cols),
            n_examples: 0,
        }
    }

    /// `m[f][·] += phi[f] · v` for every nonzero feature `f`.
    fn add_outer(m: &mut Matrix, phi: &SparseVec, v: &[f64]) {
        debug_assert_eq!(m.cols, v.len());
        for (f, x) in phi.iter() {
            let row = &mut m.data[f * m.cols..(f + 1) * m.cols];
            for (slot, &vj) in row.iter_mut().zip(v) {
                *slot += x * vj;
            }
        }
    }

    pub fn add_w_q(&mut self, phi: &SparseVec, v: &[f64]) {
        Self::add_outer(&mut self.w_q, phi, v);
    }

    pub fn add_w_p(&mut self, phi: &SparseVec, v: &[f64]) {
        Self::add_outer(&mut self.w_p, phi, v);
    }

    pub fn add_u(&mut self, phi: &SparseVec, v: &[f64]) {
        Self::add_outer(&mut self.u, phi, v);
    }

    pub fn scale(&mut self, c: f64) {
        for m in [&mut self.w_q, &mut self.w_p, &mut self.u] {
            for x in m.data.iter_mut() {
                *x *= c;
            }
        }
    }
}

/// Dense passage embeddings for one parameter snapshot.
///
/// Row `i` is `encode_passage` of passage `i` under the parameters whose
/// passage-tower hash is recorded in `params_hash`; `version` ties the
/// matrix to an index generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub version: u64,
    pub dim: usize,
    pub params_hash: String,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(version: u64, dim: usize, params_hash: String, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::ShapeMismatch {
                context: "embedding matrix".into(),
                expected: format!("multiple of dim={dim}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(EmbeddingMatrix {
            version,
            dim,
            params_hash,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw_data(&self) -> &[f64] {
        &self.data
    }
}

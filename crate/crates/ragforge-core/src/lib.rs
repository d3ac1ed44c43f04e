//! Retrieval-augmented generation with a trainable retriever.
//!
//! This crate implements the full training loop for a generator that
//! marginalizes over retrieved passages: a dual-encoder retriever (separate
//! question and passage towers over hashed bag-of-words features), an
//! approximate nearest-neighbor index over passage embeddings, a log-linear
//! token generator, and an asynchronous refresh pipeline that re-encodes and
//! re-indexes the knowledge base as the passage encoder moves during training.
//!
//! Module map:
//!
//! - [`corpus`]: documents, passage chunking, knowledge-base construction,
//!   JSONL persistence.
//! - [`encoder`]: feature hashing, encoder parameters, embedding matrices.
//! - [`ann`]: exact and HNSW inner-product indexes with snapshot persistence.
//! - [`retriever`]: top-k retrieval with fresh re-scoring, BM25, hard-negative
//!   mining.
//! - [`reader`]: generator inputs, per-document token distributions, the
//!   marginalized sequence loss and its gradients, greedy decoding.
//! - [`trainer`]: Adam, batch mixing, the train step, contrastive retriever
//!   pretraining, the full training loop, checkpoints.
//! - [`refresh`]: re-encode / re-index jobs, atomic index swap, the background
//!   orchestrator.
//! - [`eval`]: answer normalization, EM/F1/Top-k metrics, the synthetic
//!   domain-shift task, multi-scenario comparisons.

pub mod ann;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod reader;
pub mod refresh;
pub mod retriever;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

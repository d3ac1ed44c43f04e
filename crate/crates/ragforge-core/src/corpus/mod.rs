//! Documents, passages, training examples, and the knowledge base.
//!
//! A corpus enters as JSONL documents (articles or conversations), gets
//! chunked into passages of bounded length, and is assembled into a
//! [`KnowledgeBase`]: the passage list plus a closed vocabulary. Training
//! examples (question answering and statement reconstruction) are validated
//! against the knowledge base at build time; reconstruction targets that
//! already occur verbatim inside a passage are dropped as duplicates.

mod chunk;
mod kb;
pub mod jsonl;
mod tokenizer;

pub use chunk::{chunk_document, filter_reconstruction_statements, format_conversation};
pub use kb::{build_knowledge_base, BuildReport};
pub use tokenizer::{split_sentences, tokenize};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type PassageId = usize;

/// Reserved vocabulary slots. Real tokens start at [`FIRST_REGULAR_ID`].
pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
/// Marks reconstruction inputs in place of a question.
pub const PASSAGE_MARKER_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;
pub const FIRST_REGULAR_ID: TokenId = 5;

pub const PASSAGE_MARKER_TOKEN: &str = "<p>";
const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", PASSAGE_MARKER_TOKEN, "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Article,
    Conversation,
}

/// A source document before chunking.
///
/// For conversations, `body` holds a JSON array of
/// `{"speaker": ..., "utterance": ...}` turns until
/// [`format_conversation`] flattens it to plain text.
/// `abstract_text` carries summary text whose sentences become
/// reconstruction-statement candidates; it never enters the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub kind: DocKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstract_text: Option<String>,
}

/// A retrievable unit: at most `max_words` body tokens plus the source title.
///
/// `tokens` is the canonical tokenization of `body`; `body` is always the
/// space-join of `tokens`, so the two stay interderivable. Title tokens do
/// not count toward the chunk length limit and are prepended only at
/// encoding time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_id: PassageId,
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub tokens: Vec<String>,
}

impl Passage {
    pub fn from_tokens(
        passage_id: PassageId,
        doc_id: impl Into<String>,
        title: impl Into<String>,
        tokens: Vec<String>,
    ) -> Self {
        let body = tokens.join(" ");
        Passage {
            passage_id,
            doc_id: doc_id.into(),
            title: title.into(),
            body,
            tokens,
        }
    }

    /// Title tokens followed by body tokens, as seen by the passage encoder
    /// and the generator context.
    pub fn full_tokens(&self) -> Vec<String> {
        let mut out = tokenize(&self.title);
        out.extend(self.tokens.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Qa,
    Recon,
}

/// One training or evaluation example.
///
/// QA examples carry a question and an answer target; reconstruction
/// examples carry only a target statement (the retrieval query is the
/// statement itself). `gold_passage_id` is optional supervision used by
/// retrieval metrics and contrastive pretraining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub kind: ExampleKind,
    pub question: Option<String>,
    pub target: String,
    pub gold_passage_id: Option<PassageId>,
}

impl TrainExample {
    pub fn qa(
        question: impl Into<String>,
        target: impl Into<String>,
        gold_passage_id: Option<PassageId>,
    ) -> Self {
        TrainExample {
            kind: ExampleKind::Qa,
            question: Some(question.into()),
            target: target.into(),
            gold_passage_id,
        }
    }

    pub fn recon(target: impl Into<String>, gold_passage_id: Option<PassageId>) -> Self {
        TrainExample {
            kind: ExampleKind::Recon,
            question: None,
            target: target.into(),
            gold_passage_id,
        }
    }

    /// Tokens the retriever queries with: the question for QA, the target
    /// statement for reconstruction.
    pub fn query_tokens(&self) -> Vec<String> {
        match self.kind {
            ExampleKind::Qa => tokenize(self.question.as_deref().unwrap_or("")),
            ExampleKind::Recon => tokenize(&self.target),
        }
    }

    pub fn target_tokens(&self) -> Vec<String> {
        tokenize(&self.target)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ExampleKind::Qa => {
                if self.question.as_deref().map_or(true, |q| q.trim().is_empty()) {
                    return Err(Error::Other("qa example without a question".into()));
                }
            }
            ExampleKind::Recon => {
                if self.question.is_some() {
                    return Err(Error::Other("recon example with a question".into()));
                }
            }
        }
        if self.target_tokens().is_empty() {
            return Err(Error::Other("example with an empty target".into()));
        }
        Ok(())
    }
}

/// Closed token vocabulary with fixed reserved slots.
///
/// Ids 0..5 are pad, bos, eos, the reconstruction marker `<p>`, and unk.
/// The vocabulary is frozen once the knowledge base is built; tokens unseen
/// at that point map to [`UNK_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens, ids }
    }

    /// Rebuilds a vocabulary from its persisted non-reserved token list.
    pub fn from_regular_tokens(regular: Vec<String>) -> Result<Self> {
        let mut v = Vocab::new();
        for t in regular {
            if v.ids.contains_key(&t) {
                return Err(Error::Other(format!("duplicate vocab token {t:?}")));
            }
            v.intern(&t);
        }
        Ok(v)
    }

    /// Inserts `token` if absent and returns its id. Build-time only.
    pub(crate) fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Id for `token`, falling back to [`UNK_ID`] for unseen tokens.
    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens beyond the reserved slots, in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[FIRST_REGULAR_ID as usize..]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Passages plus the closed vocabulary built over them and the training
/// examples. Passage ids are contiguous and equal each passage's position,
/// which keeps them usable as embedding-matrix row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub passages: Vec<Passage>,
    pub vocab: Vocab,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage(&self, id: PassageId) -> Result<&Passage> {
        self.passages.get(id).ok_or(Error::UnknownPassage(id))
    }

    /// SHA-256 over the canonical passage serialization plus the vocabulary.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for p in &self.passages {
            bytes.extend_from_slice(jsonl::passage_line(p).as_bytes());
        }
        for t in self.vocab.regular_tokens() {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        crate::util::sha256_hex(&bytes)
    }
}

/// Knobs for corpus construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Maximum body tokens per passage; titles are not counted.
    pub max_words: usize,
    /// Inclusive word-count bounds for reconstruction statements.
    pub recon_min_words: usize,
    pub recon_max_words: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            max_words: 100,
            recon_min_words: 15,
            recon_max_words: 35,
        }
    }
}

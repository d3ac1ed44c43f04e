//! Document chunking and conversation flattening.

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{tokenize, DocKind, Document, Passage};

/// Splits a document body into passages of at most `max_words` body tokens.
///
/// Windows are taken greedily in order, so concatenating the passages'
/// tokens reproduces the tokenized body exactly and only the final passage
/// may be short. Passage ids are positions within the document; the
/// knowledge-base build reassigns globally contiguous ids.
pub fn chunk_document(doc: &Document, max_words: usize) -> Result<Vec<Passage>> {
    if max_words == 0 {
        return Err(Error::InvalidConfig("max_words must be positive".into()));
    }
    let tokens = tokenize(&doc.body);
    if tokens.is_empty() {
        return Err(Error::EmptyDocument {
            doc_id: doc.doc_id.clone(),
        });
    }
    Ok(tokens
        .chunks(max_words)
        .enumerate()
        .map(|(i, window)| {
            Passage::from_tokens(i, doc.doc_id.clone(), doc.title.clone(), window.to_vec())
        })
        .collect())
}

#[derive(Deserialize)]
struct Turn {
    speaker: String,
    utterance: String,
}

/// Flattens a conversation document into a plain-text article.
///
/// The body must hold a JSON array of `{"speaker", "utterance"}` turns;
/// each becomes `speaker: utterance` in order, and the conversation id
/// doubles as the title. Empty conversations, blank speakers, and blank
/// utterances are rejected.
pub fn format_conversation(doc: &Document) -> Result<Document> {
    if doc.kind != DocKind::Conversation {
        return Err(Error::MalformedDocument {
            doc_id: doc.doc_id.clone(),
            reason: "not a conversation".into(),
        });
    }
    let turns: Vec<Turn> =
        serde_json::from_str(&doc.body).map_err(|e| Error::MalformedDocument {
            doc_id: doc.doc_id.clone(),
            reason: format!("conversation body is not a turn array: {e}"),
        })?;
    if turns.is_empty() {
        return Err(Error::EmptyDocument {
            doc_id: doc.doc_id.clone(),
        });
    }
    let mut parts = Vec::with_capacity(turns.len());
    for (i, turn) in turns.iter().enumerate() {
        if turn.speaker.trim().is_empty() || turn.utterance.trim().is_empty() {
            return Err(Error::MalformedDocument {
                doc_id: doc.doc_id.clone(),
                reason: format!("turn {i} has an empty speaker or utterance"),
            });
        }
        parts.push(format!("{}: {}", turn.speaker.trim(), turn.utterance.trim()));
    }
    Ok(Document {
        doc_id: doc.doc_id.clone(),
        title: doc.doc_id.clone(),
        body: parts.join(" "),
        kind: DocKind::Article,
        abstract_text: doc.abstract_text.clone(),
    })
}

/// Keeps sentences whose token count lies in `[min_words, max_words]`.
///
/// Both bounds are inclusive; everything shorter or longer is discarded.
pub fn filter_reconstruction_statements(
    sentences: &[String],
    min_words: usize,
    max_words: usize,
) -> Vec<String> {
    sentences
        .iter()
        .filter(|s| {
            let n = tokenize(s).len();
            n >= min_words && n <= max_words
        })
        .cloned()
        .collect()
}

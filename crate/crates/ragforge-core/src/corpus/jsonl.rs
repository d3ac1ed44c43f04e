//! JSONL persistence for documents, passages, examples, and knowledge bases.
//!
//! All writers emit one canonical JSON object per line, so serialization is
//! byte-stable: saving the result of a load reproduces the original file.
//! Loaders report the offending path and line number on malformed input.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{tokenize, Document, ExampleKind, KnowledgeBase, Passage, PassageId, TrainExample, Vocab};

const KB_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    passage_id: PassageId,
    doc_id: String,
    title: String,
    body: String,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    kind: ExampleKind,
    question: Option<String>,
    target: String,
    gold_passage_id: Option<PassageId>,
}

#[derive(Serialize, Deserialize)]
struct KbMeta {
    format_version: u32,
    n_passages: usize,
    n_vocab: usize,
    digest: String,
}

/// Canonical single-line serialization of a passage, shared by the file
/// writer and the knowledge-base digest.
pub fn passage_line(p: &Passage) -> String {
    serde_json::to_string(&PassageRecord {
        passage_id: p.passage_id,
        doc_id: p.doc_id.clone(),
        title: p.title.clone(),
        body: p.body.clone(),
    })
    .expect("passage serialization cannot fail")
}

fn write_lines<T, I>(path: &Path, items: I, to_line: impl Fn(&T) -> String) -> Result<()>
where
    I: IntoIterator<Item = T>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", to_line(&item)).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_lines<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<()> {
    write_lines(path, docs, |d| {
        serde_json::to_string(d).expect("document serialization cannot fail")
    })
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    read_lines(path)
}

pub fn save_passages(path: &Path, passages: &[Passage]) -> Result<()> {
    write_lines(path, passages, |p| passage_line(p))
}

pub fn load_passages(path: &Path) -> Result<Vec<Passage>> {
    let records: Vec<PassageRecord> = read_lines(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        if rec.passage_id != i {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("passage_id {} out of order, expected {i}", rec.passage_id),
            });
        }
        let tokens = tokenize(&rec.body);
        out.push(Passage {
            passage_id: rec.passage_id,
            doc_id: rec.doc_id,
            title: rec.title,
            body: rec.body,
            tokens,
        });
    }
    Ok(out)
}

pub fn save_examples(path: &Path, examples: &[TrainExample]) -> Result<()> {
    write_lines(path, examples, |ex| {
        serde_json::to_string(&ExampleRecord {
            kind: ex.kind,
            question: ex.question.clone(),
            target: ex.target.clone(),
            gold_passage_id: ex.gold_passage_id,
        })
        .expect("example serialization cannot fail")
    })
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainExample>> {
    let records: Vec<ExampleRecord> = read_lines(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let ex = TrainExample {
            kind: rec.kind,
            question: rec.question,
            target: rec.target,
            gold_passage_id: rec.gold_passage_id,
        };
        ex.validate().map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes a knowledge base as a directory: `passages.jsonl`, `vocab.json`
/// (non-reserved tokens in id order), and `meta.json` with the digest.
pub fn save_kb(dir: &Path, kb: &KnowledgeBase) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_passages(&dir.join("passages.jsonl"), &kb.passages)?;
    let vocab_path = dir.join("vocab.json");
    let vocab_json = serde_json::to_string_pretty(&kb.vocab.regular_tokens())
        .expect("vocab serialization cannot fail");
    fs::write(&vocab_path, vocab_json + "\n")
        .map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
    let meta = KbMeta {
        format_version: KB_FORMAT_VERSION,
        n_passages: kb.passages.len(),
        n_vocab: kb.vocab.len(),
        digest: kb.digest(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serialization cannot fail") + "\n",
    )
    .map_err(|e| Error::io(meta_path.display().to_string(), e))
}

/// Loads a knowledge base directory and verifies its recorded digest.
pub fn load_kb(dir: &Path) -> Result<KnowledgeBase> {
    let passages = load_passages(&dir.join("passages.jsonl"))?;
    let vocab_path = dir.join("vocab.json");
    let vocab_json =
        fs::read_to_string(&vocab_path).map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
    let regular: Vec<String> =
        serde_json::from_str(&vocab_json).map_err(|e| Error::MalformedLine {
            path: vocab_path.display().to_string(),
            line: 1,
            reason: e.to_string(),
        })?;
    let vocab = Vocab::from_regular_tokens(regular)?;
    let kb = KnowledgeBase { passages, vocab };

    let meta_path = dir.join("meta.json");
    let meta_json =
        fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: KbMeta = serde_json::from_str(&meta_json).map_err(|e| Error::MalformedLine {
        path: meta_path.display().to_string(),
        line: 1,
        reason: e.to_string(),
    })?;
    if meta.format_version != KB_FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "knowledge base format v{} unsupported (want v{KB_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let digest = kb.digest();
    if meta.digest != digest {
        return Err(Error::DigestMismatch {
            context: format!("knowledge base at {}", dir.display()),
            expected: meta.digest,
            actual: digest,
        });
    }
    Ok(kb)
}

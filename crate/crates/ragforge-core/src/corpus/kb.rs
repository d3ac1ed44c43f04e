//! Knowledge-base assembly.

use crate::error::Result;
use crate::util::contains_subsequence;

use super::{
    chunk_document, format_conversation, CorpusConfig, DocKind, Document, ExampleKind,
    KnowledgeBase, Passage, TrainExample, Vocab,
};

/// Counters from a knowledge-base build.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub n_documents: usize,
    pub n_passages: usize,
    pub n_qa: usize,
    pub n_recon: usize,
    /// Reconstruction examples dropped because their target already occurs
    /// verbatim inside some passage body.
    pub recon_duplicates_dropped: usize,
}

/// Chunks documents into passages, assigns contiguous passage ids, builds
/// the closed vocabulary, and deduplicates reconstruction targets against
/// passage bodies.
///
/// Conversations are flattened before chunking. The vocabulary interns
/// passage tokens first (in passage order), then example tokens, and is
/// closed afterwards. A reconstruction example whose target tokens form a
/// contiguous subsequence of any passage's body tokens is dropped and
/// counted in the report; the surviving examples come back in input order.
pub fn build_knowledge_base(
    docs: &[Document],
    examples: Vec<TrainExample>,
    config: &CorpusConfig,
) -> Result<(KnowledgeBase, Vec<TrainExample>, BuildReport)> {
    let mut passages: Vec<Passage> = Vec::new();
    for doc in docs {
        let flattened;
        let doc = match doc.kind {
            DocKind::Conversation => {
                flattened = format_conversation(doc)?;
                &flattened
            }
            DocKind::Article => doc,
        };
        for mut p in chunk_document(doc, config.max_words)? {
            p.passage_id = passages.len();
            passages.push(p);
        }
    }

    let mut vocab = Vocab::new();
    for p in &passages {
        for t in p.full_tokens() {
            vocab.intern(&t);
        }
    }

    let mut report = BuildReport {
        n_documents: docs.len(),
        n_passages: passages.len(),
        ..BuildReport::default()
    };

    let mut kept = Vec::with_capacity(examples.len());
    for ex in examples {
        ex.validate()?;
        let target = ex.target_tokens();
        if ex.kind == ExampleKind::Recon
            && passages
                .iter()
                .any(|p| contains_subsequence(&p.tokens, &target))
        {
            report.recon_duplicates_dropped += 1;
            continue;
        }
        for t in ex.query_tokens().iter().chain(target.iter()) {
            vocab.intern(t);
        }
        match ex.kind {
            ExampleKind::Qa => report.n_qa += 1,
            ExampleKind::Recon => report.n_recon += 1,
        }
        kept.push(ex);
    }
    if report.recon_duplicates_dropped > 0 {
        log::info!(
            "dropped {} reconstruction targets duplicated in passages",
            report.recon_duplicates_dropped
        );
    }

    Ok((KnowledgeBase { passages, vocab }, kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS_ID, EOS_ID, FIRST_REGULAR_ID, PAD_ID, PASSAGE_MARKER_ID, UNK_ID};

    fn doc(doc_id: &str, title: &str, body: &str) -> Document {
        Document {
            doc_id: doc_id.into(),
            title: title.into(),
            body: body.into(),
            kind: DocKind::Article,
            abstract_text: None,
        }
    }

    fn build(
        docs: &[Document],
        examples: Vec<TrainExample>,
    ) -> (KnowledgeBase, Vec<TrainExample>, BuildReport) {
        build_knowledge_base(docs, examples, &CorpusConfig::default()).unwrap()
    }

    #[test]
    fn passage_ids_are_contiguous_across_documents() {
        let body: String = (0..150).map(|i| format!("t{i} ")).collect();
        let docs = vec![doc("a", "A", &body), doc("b", "B", &body)];
        let (kb, _, report) = build(&docs, vec![]);
        assert_eq!(report.n_passages, 4);
        for (i, p) in kb.passages.iter().enumerate() {
            assert_eq!(p.passage_id, i);
        }
        assert_eq!(kb.passages[0].doc_id, "a");
        assert_eq!(kb.passages[2].doc_id, "b");
    }

    #[test]
    fn reserved_vocab_slots_are_fixed() {
        let (kb, _, _) = build(&[doc("a", "T", "alpha beta")], vec![]);
        assert_eq!(kb.vocab.id("<pad>"), PAD_ID);
        assert_eq!(kb.vocab.id("<bos>"), BOS_ID);
        assert_eq!(kb.vocab.id("<eos>"), EOS_ID);
        assert_eq!(kb.vocab.id("<p>"), PASSAGE_MARKER_ID);
        assert_eq!(kb.vocab.id("<unk>"), UNK_ID);
        assert!(kb.vocab.id("alpha") >= FIRST_REGULAR_ID);
        assert_eq!(kb.vocab.id("never-seen-token"), UNK_ID);
    }

    #[test]
    fn vocab_covers_passages_and_examples() {
        let (kb, kept, _) = build(
            &[doc("a", "Title Word", "alpha beta gamma")],
            vec![TrainExample::qa("which word", "delta", Some(0))],
        );
        for t in ["title", "word", "alpha", "beta", "gamma", "which", "delta"] {
            assert_ne!(kb.vocab.id(t), UNK_ID, "{t} should be interned");
        }
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn duplicate_recon_targets_are_dropped_and_counted() {
        let examples = vec![
            TrainExample::recon("beta gamma", Some(0)),
            TrainExample::recon("gamma beta", Some(0)),
        ];
        let (_, kept, report) = build(&[doc("a", "T", "alpha beta gamma delta")], examples);
        assert_eq!(report.recon_duplicates_dropped, 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].target, "gamma beta");
        assert_eq!(report.n_recon, 1);
    }

    #[test]
    fn qa_examples_are_never_deduplicated() {
        let examples = vec![TrainExample::qa("q", "beta gamma", Some(0))];
        let (_, kept, report) = build(&[doc("a", "T", "alpha beta gamma")], examples);
        assert_eq!(kept.len(), 1);
        assert_eq!(report.n_qa, 1);
        assert_eq!(report.recon_duplicates_dropped, 0);
    }

    #[test]
    fn invalid_examples_fail_the_build() {
        let no_question = TrainExample {
            kind: ExampleKind::Qa,
            question: None,
            target: "x".into(),
            gold_passage_id: None,
        };
        assert!(
            build_knowledge_base(&[doc("a", "T", "b")], vec![no_question], &CorpusConfig::default())
                .is_err()
        );
    }

    #[test]
    fn digest_is_stable_and_input_sensitive() {
        let (kb1, _, _) = build(&[doc("a", "T", "alpha beta")], vec![]);
        let (kb2, _, _) = build(&[doc("a", "T", "alpha beta")], vec![]);
        let (kb3, _, _) = build(&[doc("a", "T", "alpha gamma")], vec![]);
        assert_eq!(kb1.digest(), kb2.digest());
        assert_ne!(kb1.digest(), kb3.digest());
    }
}

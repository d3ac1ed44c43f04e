//! One function per subcommand. Each command touches the filesystem only
//! inside its `--out` target (plus read-only inputs); directory-producing
//! commands finish by writing their run manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use serde::Serialize;

use ragforge_core::corpus::{
    build_knowledge_base, jsonl, tokenize, CorpusConfig, ExampleKind, PassageId,
};
use ragforge_core::eval::{
    evaluate, index_for_checkpoint, run_comparison, ComparisonConfig, Scenario,
};
use ragforge_core::refresh::RefreshStatus;
use ragforge_core::retriever::{mine_hard_negatives, retrieve, Bm25Index, Bm25Params, RetrieverConfig};
use ragforge_core::trainer::{run_training_from, Checkpoint, TrainConfig};

use crate::config::load_train_config;
use crate::manifest::RunManifest;
use crate::{Command, ModeArg};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            docs,
            out,
            max_words,
            recon_min,
            recon_max,
            examples,
        } => ingest(&docs, &out, max_words, recon_min, recon_max, examples.as_deref()),
        Command::Train {
            config,
            kb,
            train,
            valid,
            mode,
            out,
        } => run_train(config.as_deref(), &kb, &train, &valid, mode, &out),
        Command::Eval { ckpt, kb, test, out } => run_eval(&ckpt, &kb, &test, &out),
        Command::Retrieve { kb, ckpt, query, k } => run_retrieve(&kb, &ckpt, &query, k),
        Command::MineNegatives { kb, qa, n, out } => mine_negatives(&kb, &qa, n, &out),
        Command::Compare {
            task,
            scenarios,
            seeds,
            out,
        } => compare(&task, &scenarios, seeds, &out),
        Command::Status { run } => status(&run),
    }
}

fn ingest(
    docs: &Path,
    out: &Path,
    max_words: usize,
    recon_min: usize,
    recon_max: usize,
    examples: Option<&Path>,
) -> Result<()> {
    let mut manifest = RunManifest::begin("ingest");
    manifest.digest_file("docs", docs)?;
    let documents = jsonl::load_documents(docs)?;
    let examples_in = match examples {
        Some(path) => {
            manifest.digest_file("examples", path)?;
            jsonl::load_examples(path)?
        }
        None => Vec::new(),
    };
    let config = CorpusConfig {
        max_words,
        recon_min_words: recon_min,
        recon_max_words: recon_max,
    };
    manifest.set_config(&ConfigEcho::corpus(&config));
    let (kb, kept, report) = build_knowledge_base(&documents, examples_in, &config)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    jsonl::save_kb(out, &kb)?;
    if examples.is_some() {
        jsonl::save_examples(&out.join("examples.jsonl"), &kept)?;
    }
    manifest.record_digest("kb", &kb.digest());
    println!(
        "ingested {} documents -> {} passages, vocab {}; kept {} QA + {} reconstruction examples ({} duplicates dropped)",
        report.n_documents,
        report.n_passages,
        kb.vocab.len(),
        report.n_qa,
        report.n_recon,
        report.recon_duplicates_dropped
    );
    manifest.finish(out)
}

/// Serialized alongside digests so corpus and training runs hash a labeled
/// configuration rather than bare values.
#[derive(Serialize)]
struct ConfigEcho<T: Serialize> {
    kind: &'static str,
    config: T,
}

impl ConfigEcho<()> {
    fn corpus(config: &CorpusConfig) -> ConfigEcho<&CorpusConfig> {
        ConfigEcho { kind: "corpus", config }
    }
}

fn run_train(
    config: Option<&Path>,
    kb_dir: &Path,
    train: &Path,
    valid: &Path,
    mode: Option<ModeArg>,
    out: &Path,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => load_train_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = mode {
        cfg.mode = mode.into();
    }
    if let Ok(workers) = std::env::var("RAGFORGE_WORKERS") {
        cfg.refresh.n_workers = workers
            .parse()
            .context("RAGFORGE_WORKERS must be a positive integer")?;
        ensure!(cfg.refresh.n_workers > 0, "RAGFORGE_WORKERS must be positive");
    }

    let mut manifest = RunManifest::begin("train");
    manifest.digest_file("train", train)?;
    manifest.digest_file("valid", valid)?;
    manifest.set_config(&cfg);
    manifest.seed = Some(cfg.seed);

    let kb = Arc::new(jsonl::load_kb(kb_dir)?);
    manifest.record_digest("kb", &kb.digest());
    let train_ex = jsonl::load_examples(train)?;
    let valid_ex = jsonl::load_examples(valid)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = run_training_from(kb, None, &train_ex, &valid_ex, &cfg, Some(out))?;
    for epoch in &report.epochs {
        println!(
            "epoch {:>3}: loss {:.4}, val EM {:.2} F1 {:.2} Top-{} {:.2}, index v{}",
            epoch.epoch, epoch.mean_loss, epoch.val_em, epoch.val_f1, cfg.k, epoch.val_top_k,
            epoch.index_version
        );
    }
    println!(
        "best checkpoint: epoch {} (step {}), val EM {:.2} F1 {:.2} -> {}",
        report.best.epoch,
        report.best.step,
        report.best.val_em,
        report.best.val_f1,
        out.join("checkpoint.json").display()
    );
    manifest.finish(out)
}

fn run_eval(ckpt: &Path, kb_dir: &Path, test: &Path, out: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let kb = jsonl::load_kb(kb_dir)?;
    let test_ex = jsonl::load_examples(test)?;
    let index = index_for_checkpoint(&checkpoint, &kb)?;
    let report = evaluate(&checkpoint, &test_ex, &kb, &index)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out, json + "\n").with_context(|| format!("writing report {}", out.display()))?;
    println!(
        "EM {:.2}  F1 {:.2}  Top-5 {:.2}  Top-20 {:.2}  ({} examples, matched against {})",
        report.em, report.f1, report.top5, report.top20, report.n_examples, report.match_scope
    );
    Ok(())
}

#[derive(Serialize)]
struct RetrievedLine<'a> {
    rank: usize,
    passage_id: PassageId,
    stale_score: f64,
    fresh_score: f64,
    doc_prob: f64,
    title: &'a str,
    body: &'a str,
}

fn run_retrieve(kb_dir: &Path, ckpt: &Path, query: &str, k: usize) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let kb = jsonl::load_kb(kb_dir)?;
    let index = index_for_checkpoint(&checkpoint, &kb)?;
    let tokens = tokenize(query);
    ensure!(!tokens.is_empty(), "query contains no tokens");
    let config = RetrieverConfig {
        k,
        tau: checkpoint.config.tau,
    };
    let hits = retrieve(&tokens, &kb, &index, &checkpoint.params, &config)?;
    for (rank, &id) in hits.candidate_ids.iter().enumerate() {
        let passage = kb.passage(id)?;
        let line = RetrievedLine {
            rank: rank + 1,
            passage_id: id,
            stale_score: hits.stale_scores[rank],
            fresh_score: hits.fresh_scores[rank],
            doc_prob: hits.doc_probs[rank],
            title: &passage.title,
            body: &passage.body,
        };
        println!("{}", serde_json::to_string(&line).expect("line serializes"));
    }
    Ok(())
}

#[derive(Serialize)]
struct NegativesRecord<'a> {
    question: &'a str,
    target: &'a str,
    gold_passage_id: Option<PassageId>,
    negative_ids: Vec<PassageId>,
    /// False when fewer than the requested negatives survived the
    /// answer-exclusion filter.
    complete: bool,
}

fn mine_negatives(kb_dir: &Path, qa: &Path, n: usize, out: &Path) -> Result<()> {
    ensure!(n > 0, "need at least one negative per example");
    let kb = jsonl::load_kb(kb_dir)?;
    let examples = jsonl::load_examples(qa)?;
    let bm25 = Bm25Index::build(&kb, &Bm25Params::default());
    let mut lines = Vec::new();
    let mut skipped = 0usize;
    let mut incomplete = 0usize;
    for ex in &examples {
        let (ExampleKind::Qa, Some(question)) = (ex.kind, ex.question.as_deref()) else {
            skipped += 1;
            continue;
        };
        let q_tokens = tokenize(question);
        let a_tokens = tokenize(&ex.target);
        let mined = mine_hard_negatives(&q_tokens, &a_tokens, &kb, &bm25, n)?;
        incomplete += usize::from(!mined.complete);
        let record = NegativesRecord {
            question,
            target: &ex.target,
            gold_passage_id: ex.gold_passage_id,
            negative_ids: mined.ids,
            complete: mined.complete,
        };
        lines.push(serde_json::to_string(&record).expect("record serializes"));
    }
    ensure!(!lines.is_empty(), "no QA examples with questions in {}", qa.display());
    let mut body = lines.join("\n");
    body.push('\n');
    std::fs::write(out, body).with_context(|| format!("writing negatives {}", out.display()))?;
    println!(
        "mined negatives for {} examples ({} short of {n}, {} non-QA skipped) -> {}",
        lines.len(),
        incomplete,
        skipped,
        out.display()
    );
    Ok(())
}

fn compare(task: &str, scenarios: &str, seeds: usize, out: &Path) -> Result<()> {
    ensure!(
        task.eq_ignore_ascii_case("synthetic"),
        "unknown task `{task}`; `synthetic` is the only built-in task"
    );
    ensure!(seeds > 0, "need at least one seed");
    let list: Vec<Scenario> = if scenarios.trim().eq_ignore_ascii_case("all") {
        Scenario::ALL.to_vec()
    } else {
        scenarios
            .split(',')
            .map(|s| {
                Scenario::parse(s).with_context(|| {
                    let labels: Vec<&str> = Scenario::ALL.iter().map(|sc| sc.label()).collect();
                    format!("unknown scenario `{}`; expected one of {}", s.trim(), labels.join(", "))
                })
            })
            .collect::<Result<_>>()?
    };
    let config = ComparisonConfig {
        seeds: (0..seeds as u64).collect(),
        ..ComparisonConfig::default()
    };
    let table = run_comparison(&config, &list)?;
    print!("{}", table.render());
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    std::fs::write(out, json + "\n").with_context(|| format!("writing table {}", out.display()))?;
    Ok(())
}

fn status(run: &Path) -> Result<()> {
    let path: PathBuf = run.join("refresh_status.json");
    let text = std::fs::read_to_string(&path).with_context(|| {
        format!(
            "reading {} (is `{}` a training output directory?)",
            path.display(),
            run.display()
        )
    })?;
    let parsed: RefreshStatus = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    println!("{}", serde_json::to_string_pretty(&parsed).expect("status serializes"));
    Ok(())
}

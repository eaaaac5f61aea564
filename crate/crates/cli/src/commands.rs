use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use hdlink_core::corpus::{corpus_to_string, parse_corpus, Document};
use hdlink_core::disambiguation::{self, DisambiguatedKb, DisambiguationError};
use hdlink_core::encoder::LinearEncoder;
use hdlink_core::evaluation::{
    align_predictions, link_corpus, parse_predictions_str, predictions_to_tsv, recall_at_1, EvalReport,
};
use hdlink_core::homonyms::{find_all_homonyms, homonym_report};
use hdlink_core::kb::{parse_kb, parse_taxonomy, Kb};
use hdlink_core::pipeline::index_for;
use hdlink_core::retrieval::NameIndex;
use hdlink_core::string_match;
use hdlink_core::training;
use log::warn;
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{manifest_path, RunManifest};
use crate::{Context, UsageError};

fn load_kb(ctx: &Context, path: &Path) -> Result<Kb> {
    let kb = parse_kb(path, ctx.parse).with_context(|| format!("invalid KB {}", path.display()))?;
    let v = kb.validation();
    if !v.is_clean() {
        warn!(
            "{}: {} entities without a preferred name, {} with several",
            path.display(),
            v.missing_preferred.len(),
            v.multiple_preferred.len()
        );
    }
    Ok(kb)
}

fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    parse_corpus(path).with_context(|| format!("invalid corpus {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_disambiguation(kb: &Kb, taxonomy: Option<&Path>) -> Result<DisambiguatedKb> {
    let tax = taxonomy.map(parse_taxonomy).transpose()?;
    match disambiguation::disambiguate(kb, tax.as_ref()) {
        Err(DisambiguationError::TaxonomyRequired) => {
            Err(UsageError("the KB has a species column; pass --taxonomy".into()).into())
        }
        other => Ok(other?),
    }
}

pub fn stats(ctx: &Context, kb_path: &Path, out: &Path, tsv: Option<&Path>) -> Result<()> {
    let t = Instant::now();
    let kb = load_kb(ctx, kb_path)?;
    let report = homonym_report(&kb);
    let kv = report.to_key_value();
    write(out, &kv)?;
    print!("{kv}");

    let mut m = RunManifest::new("stats", ctx.seed, &json!({ "parse": format!("{:?}", ctx.parse) }));
    m.input(kb_path)?;
    m.output(out)?;
    if let Some(tsv) = tsv {
        write(tsv, &report.to_tsv())?;
        m.output(tsv)?;
    }
    m.time("total", t.elapsed());
    m.write(&manifest_path(out))
}

pub fn disambiguate(
    ctx: &Context,
    kb_path: &Path,
    taxonomy: Option<&Path>,
    out: &Path,
    audit: Option<&Path>,
) -> Result<()> {
    let t = Instant::now();
    let kb = load_kb(ctx, kb_path)?;
    let hd = run_disambiguation(&kb, taxonomy)?;
    hd.kb.save(out)?;
    let audit = audit.map_or_else(|| sibling(out, ".audit.tsv"), Path::to_path_buf);
    write(&audit, &hd.audit_tsv())?;
    println!(
        "success_rate: {}\noriginal_homonyms: {}\nunresolved: {}",
        hd.success_rate,
        hd.original_homonyms,
        hd.unresolved.len()
    );

    let mut m = RunManifest::new("disambiguate", ctx.seed, &json!({ "parse": format!("{:?}", ctx.parse) }));
    m.input(kb_path)?;
    if let Some(tax) = taxonomy {
        m.input(tax)?;
    }
    m.output(out)?;
    m.output(&audit)?;
    m.time("total", t.elapsed());
    m.write(&manifest_path(out))
}

pub fn estimate_affected(ctx: &Context, kb_path: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let t = Instant::now();
    let kb = load_kb(ctx, kb_path)?;
    let docs = load_corpus(corpus)?;
    let report = string_match::estimate_affected(&docs, &kb, &find_all_homonyms(&kb))?;
    write(out, &report.to_tsv())?;
    print!("{}", report.summary());

    let mut m = RunManifest::new("estimate-affected", ctx.seed, &json!({}));
    m.input(kb_path)?;
    m.input(corpus)?;
    m.output(out)?;
    m.time("total", t.elapsed());
    m.write(&manifest_path(out))
}

pub struct TrainArgs {
    pub kb: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub log: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

fn run_config(ctx: &Context, path: Option<&Path>, epochs: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?.with_seed(ctx.seed);
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.encoder
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let t = Instant::now();
    let cfg = run_config(ctx, a.config.as_deref(), a.epochs)?;
    let kb = load_kb(ctx, &a.kb)?;
    let docs = load_corpus(&a.corpus)?;
    let enc = LinearEncoder::from_kb(cfg.encoder.clone(), &kb)?;
    let outcome = training::train(enc, &docs, &kb, &cfg.train)?;
    outcome.encoder.save(&a.out)?;
    let log = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".loss.tsv"));
    write(&log, &outcome.loss_log_tsv())?;

    let mut m = RunManifest::new("train", ctx.seed, &cfg);
    m.input(&a.kb)?;
    m.input(&a.corpus)?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    m.output(&a.out)?;
    m.output(&log)?;
    if let Some(path) = &a.index {
        index_for(&outcome.encoder, &kb, outcome.generation + 1)?.save(path)?;
        m.output(path)?;
    }
    if let Some(last) = outcome.epochs.last() {
        println!("final_epoch_loss: {}\nskipped: {}", last.mean_loss, last.skipped);
    }
    m.time("total", t.elapsed());
    m.write(&manifest_path(&a.out))
}

pub fn link(
    ctx: &Context,
    kb_path: &Path,
    model: &Path,
    corpus: &Path,
    out: &Path,
    index_path: Option<&Path>,
) -> Result<()> {
    let t = Instant::now();
    let kb = load_kb(ctx, kb_path)?;
    let enc = LinearEncoder::load(model).with_context(|| format!("cannot load model {}", model.display()))?;
    let index = match index_path {
        Some(p) => NameIndex::load(p, &kb)?,
        None => index_for(&enc, &kb, 0)?,
    };
    let docs = load_corpus(corpus)?;
    let preds = link_corpus(&index, &enc, &docs)?;
    write(out, &predictions_to_tsv(&preds))?;

    let mut m = RunManifest::new("link", ctx.seed, enc.config());
    m.input(kb_path)?;
    m.input(model)?;
    m.input(corpus)?;
    if let Some(p) = index_path {
        m.input(p)?;
    }
    m.output(out)?;
    m.time("total", t.elapsed());
    m.write(&manifest_path(out))
}

fn score(preds_tsv: &str, docs: &[Document], kb: Option<&Kb>) -> Result<EvalReport> {
    let preds = parse_predictions_str(preds_tsv)?;
    let predicted = align_predictions(&preds, docs)?;
    let gold: Vec<_> = docs.iter().flat_map(|d| d.mentions.iter().map(|m| m.gold.clone())).collect();
    let flags = kb
        .map(|kb| string_match::estimate_affected(docs, kb, &find_all_homonyms(kb)).map(|r| r.flags()))
        .transpose()?;
    Ok(recall_at_1(&predicted, &gold, flags.as_deref())?)
}

pub fn evaluate(
    ctx: &Context,
    pred: &Path,
    corpus: &Path,
    out: &Path,
    tsv: Option<&Path>,
    kb_path: Option<&Path>,
) -> Result<()> {
    let t = Instant::now();
    let docs = load_corpus(corpus)?;
    let kb = kb_path.map(|p| load_kb(ctx, p)).transpose()?;
    let text = fs::read_to_string(pred).with_context(|| format!("cannot read {}", pred.display()))?;
    let report = score(&text, &docs, kb.as_ref())?;
    write(out, &report.to_key_value())?;
    print!("{}", report.to_key_value());

    let mut m = RunManifest::new("evaluate", ctx.seed, &json!({}));
    m.input(pred)?;
    m.input(corpus)?;
    if let Some(p) = kb_path {
        m.input(p)?;
    }
    m.output(out)?;
    if let Some(tsv) = tsv {
        write(tsv, &report.to_tsv())?;
        m.output(tsv)?;
    }
    m.time("total", t.elapsed());
    m.write(&manifest_path(out))
}

pub struct PipelineArgs {
    pub kb: PathBuf,
    pub taxonomy: Option<PathBuf>,
    pub train: PathBuf,
    pub test: PathBuf,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub no_hd: bool,
}

/// Fixed file names inside `--out-dir`.
pub mod outputs {
    pub const STATS: &str = "stats.txt";
    pub const STATS_TSV: &str = "stats.tsv";
    pub const KB: &str = "kb.tsv";
    pub const AUDIT: &str = "audit.tsv";
    pub const TRAIN_SPLIT: &str = "train.sentences.jsonl";
    pub const TEST_SPLIT: &str = "test.sentences.jsonl";
    pub const AFFECTED: &str = "affected.tsv";
    pub const MODEL: &str = "model.bin";
    pub const INDEX: &str = "index.bin";
    pub const LOSS: &str = "loss.tsv";
    pub const PREDICTIONS: &str = "predictions.tsv";
    pub const REPORT: &str = "report.txt";
    pub const REPORT_TSV: &str = "report.tsv";
    pub const MANIFEST: &str = "pipeline.manifest.json";
}

pub fn pipeline(ctx: &Context, a: &PipelineArgs) -> Result<()> {
    use outputs::*;
    let start = Instant::now();
    let cfg = run_config(ctx, a.config.as_deref(), a.epochs)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let path = |name: &str| a.out_dir.join(name);
    let mut m = RunManifest::new("pipeline", ctx.seed, &json!({ "run": &cfg, "no_hd": a.no_hd }));
    m.input(&a.kb)?;
    if let Some(t) = &a.taxonomy {
        m.input(t)?;
    }
    m.input(&a.train)?;
    m.input(&a.test)?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    let mut written = Vec::new();

    let t = Instant::now();
    let raw = load_kb(ctx, &a.kb)?;
    let report = homonym_report(&raw);
    write(&path(STATS), &report.to_key_value())?;
    write(&path(STATS_TSV), &report.to_tsv())?;
    written.extend([STATS, STATS_TSV]);
    let kb = if a.no_hd {
        raw.clone()
    } else {
        let hd = run_disambiguation(&raw, a.taxonomy.as_deref())?;
        write(&path(AUDIT), &hd.audit_tsv())?;
        written.push(AUDIT);
        println!("success_rate: {}", hd.success_rate);
        hd.kb
    };
    kb.save(&path(KB))?;
    written.push(KB);
    m.time("disambiguate", t.elapsed());

    let t = Instant::now();
    let mut train_docs = load_corpus(&a.train)?;
    let mut test_docs = load_corpus(&a.test)?;
    for d in train_docs.iter_mut().chain(test_docs.iter_mut()) {
        d.ensure_sentences();
    }
    write(&path(TRAIN_SPLIT), &corpus_to_string(&train_docs))?;
    write(&path(TEST_SPLIT), &corpus_to_string(&test_docs))?;
    let affected = string_match::estimate_affected(&test_docs, &raw, &find_all_homonyms(&raw))?;
    write(&path(AFFECTED), &affected.to_tsv())?;
    written.extend([TRAIN_SPLIT, TEST_SPLIT, AFFECTED]);
    m.time("corpus", t.elapsed());

    let t = Instant::now();
    let enc = LinearEncoder::from_kb(cfg.encoder.clone(), &kb)?;
    let outcome = training::train(enc, &train_docs, &kb, &cfg.train)?;
    outcome.encoder.save(&path(MODEL))?;
    write(&path(LOSS), &outcome.loss_log_tsv())?;
    let index = index_for(&outcome.encoder, &kb, outcome.generation + 1)?;
    index.save(&path(INDEX))?;
    written.extend([MODEL, LOSS, INDEX]);
    m.time("train", t.elapsed());

    let t = Instant::now();
    let preds = link_corpus(&index, &outcome.encoder, &test_docs)?;
    let preds_tsv = predictions_to_tsv(&preds);
    write(&path(PREDICTIONS), &preds_tsv)?;
    written.push(PREDICTIONS);
    m.time("link", t.elapsed());

    let t = Instant::now();
    let eval = score(&preds_tsv, &test_docs, Some(&raw))?;
    write(&path(REPORT), &eval.to_key_value())?;
    write(&path(REPORT_TSV), &eval.to_tsv())?;
    written.extend([REPORT, REPORT_TSV]);
    m.time("evaluate", t.elapsed());
    print!("{}", eval.to_key_value());

    for name in written {
        m.output(&path(name))?;
    }
    m.time("total", start.elapsed());
    m.write(&path(MANIFEST))
}

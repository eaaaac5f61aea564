//! Linking with a trained encoder and strict recall@1 scoring.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::Document;
use crate::encoder::{EncoderError, LinearEncoder};
use crate::kb::EntityId;
use crate::retrieval::{NameIndex, RetrievalError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot link against an empty index")]
    EmptyIndex,
    #[error("no mentions to evaluate")]
    NoMentions,
    #[error("{predictions} predictions for {gold} gold mentions")]
    Misaligned { predictions: usize, gold: usize },
    #[error("no prediction for mention {0}")]
    MissingPrediction(String),
    #[error("predictions line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub gold: BTreeSet<EntityId>,
    /// Every entity the top-ranked name maps to.
    pub entities: BTreeSet<EntityId>,
    pub top_name: String,
    pub score: f64,
}

/// Links mention `i` of `doc`. Sentence offsets are taken from the
/// document, or produced by the splitter when absent.
pub fn link(index: &NameIndex, enc: &LinearEncoder, doc: &Document, i: usize) -> Result<Prediction, EvalError> {
    if index.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    let m = &doc.mentions[i];
    let e = enc.embed(&m.surface, Some(&doc.context(i)))?;
    let top = index.query_topk(&e.0, 1)?.remove(0);
    Ok(Prediction {
        doc_id: doc.id.clone(),
        start: m.start,
        end: m.end,
        gold: m.gold.clone(),
        entities: index.entities_of(&top.name),
        top_name: top.name,
        score: top.score,
    })
}

/// Predictions for every mention, in corpus order.
pub fn link_corpus(index: &NameIndex, enc: &LinearEncoder, docs: &[Document]) -> Result<Vec<Prediction>, EvalError> {
    let per_doc: Vec<Vec<Prediction>> = docs
        .par_iter()
        .map(|doc| {
            let mut doc = doc.clone();
            doc.ensure_sentences();
            (0..doc.mentions.len()).map(|i| link(index, enc, &doc, i)).collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Strict rule: exactly one predicted entity, and it is a gold entity.
pub fn is_correct(predicted: &BTreeSet<EntityId>, gold: &BTreeSet<EntityId>) -> bool {
    predicted.len() == 1 && predicted.iter().all(|e| gold.contains(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
}

impl Tally {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: Tally,
    /// Predictions naming more than one entity.
    pub multi_entity: usize,
    pub affected: Option<Tally>,
    pub unaffected: Option<Tally>,
}

impl EvalReport {
    pub fn recall_at_1(&self) -> f64 {
        self.overall.recall()
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!(
            "recall_at_1: {}\ntotal: {}\ncorrect: {}\nmulti_entity_predictions: {}\n",
            self.recall_at_1(),
            self.overall.total,
            self.overall.correct,
            self.multi_entity
        );
        for (label, t) in [("affected", self.affected), ("unaffected", self.unaffected)] {
            if let Some(t) = t {
                let _ = writeln!(s, "{label}_total: {}\n{label}_correct: {}\n{label}_recall_at_1: {}", t.total, t.correct, t.recall());
            }
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("subset\ttotal\tcorrect\trecall_at_1\n");
        let rows = [("all", Some(self.overall)), ("affected", self.affected), ("unaffected", self.unaffected)];
        for (label, t) in rows {
            if let Some(t) = t {
                let _ = writeln!(s, "{label}\t{}\t{}\t{}", t.total, t.correct, t.recall());
            }
        }
        s
    }
}

/// Micro-averaged strict recall@1, optionally split by affected flags.
pub fn recall_at_1(
    predicted: &[BTreeSet<EntityId>],
    gold: &[BTreeSet<EntityId>],
    affected: Option<&[bool]>,
) -> Result<EvalReport, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::Misaligned {
            predictions: predicted.len(),
            gold: gold.len(),
        });
    }
    if let Some(flags) = affected {
        if flags.len() != gold.len() {
            return Err(EvalError::Misaligned {
                predictions: flags.len(),
                gold: gold.len(),
            });
        }
    }
    if predicted.is_empty() {
        return Err(EvalError::NoMentions);
    }
    let mut overall = Tally::default();
    let mut split = [Tally::default(), Tally::default()];
    let mut multi_entity = 0;
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        let ok = is_correct(p, g) as usize;
        overall.total += 1;
        overall.correct += ok;
        if p.len() > 1 {
            multi_entity += 1;
        }
        if let Some(flags) = affected {
            let t = &mut split[usize::from(!flags[i])];
            t.total += 1;
            t.correct += ok;
        }
    }
    Ok(EvalReport {
        overall,
        multi_entity,
        affected: affected.map(|_| split[0]),
        unaffected: affected.map(|_| split[1]),
    })
}

/// Lenient variant that credits any prediction containing a gold entity.
pub fn relaxed_recall_at_1(predicted: &[BTreeSet<EntityId>], gold: &[BTreeSet<EntityId>]) -> Result<f64, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::Misaligned {
            predictions: predicted.len(),
            gold: gold.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::NoMentions);
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p.iter().any(|e| g.contains(e))).count();
    Ok(hits as f64 / predicted.len() as f64)
}

fn join_ids(ids: &BTreeSet<EntityId>) -> String {
    ids.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";")
}

const PREDICTIONS_HEADER: &str = "doc_id\tstart\tend\tgold\tpredicted\ttop_name\tscore";

pub fn predictions_to_tsv(preds: &[Prediction]) -> String {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for p in preds {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.doc_id,
            p.start,
            p.end,
            join_ids(&p.gold),
            join_ids(&p.entities),
            p.top_name,
            p.score
        );
    }
    s
}

fn parse_ids(field: &str) -> Result<BTreeSet<EntityId>, String> {
    field
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<i64>().map(EntityId).map_err(|e| format!("bad entity id {s:?}: {e}")))
        .collect()
}

pub fn parse_predictions_str(text: &str) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.is_empty() || (n == 0 && line == PREDICTIONS_HEADER) {
            continue;
        }
        let err = |message: String| EvalError::Parse { line: line_no, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad offset {s:?}: {e}")));
        out.push(Prediction {
            doc_id: f[0].to_string(),
            start: num(f[1])?,
            end: num(f[2])?,
            gold: parse_ids(f[3]).map_err(err)?,
            entities: parse_ids(f[4]).map_err(err)?,
            top_name: f[5].to_string(),
            score: f[6].parse().map_err(|e| err(format!("bad score {:?}: {e}", f[6])))?,
        });
    }
    Ok(out)
}

/// Predicted entity sets aligned with the corpus mentions, looked up by
/// document id and offsets.
pub fn align_predictions(preds: &[Prediction], docs: &[Document]) -> Result<Vec<BTreeSet<EntityId>>, EvalError> {
    let by_key: HashMap<(&str, usize, usize), &Prediction> =
        preds.iter().map(|p| ((p.doc_id.as_str(), p.start, p.end), p)).collect();
    let mut out = Vec::new();
    for doc in docs {
        for m in &doc.mentions {
            match by_key.get(&(doc.id.as_str(), m.start, m.end)) {
                Some(p) => out.push(p.entities.clone()),
                None => return Err(EvalError::MissingPrediction(format!("{}:{}-{}", doc.id, m.start, m.end))),
            }
        }
    }
    Ok(out)
}

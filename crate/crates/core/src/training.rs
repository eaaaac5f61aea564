//! Marginal maximum likelihood training of the linear encoder over
//! candidate pools built with candidate sharing.
//!
//! For a mention `m` with features `x` and candidates with features `c_i`,
//! scores are `s_i = <W^T x, W^T c_i>` and `P = softmax(s)`. The loss is
//! `-ln(sum of P_i over positives)`. With `Q_i = P_i / sum_pos P` on
//! positives (0 elsewhere) and `g = P - Q`, the gradient is
//! `dW = x (sum_i g_i e_i)^T + sum_i c_i (g_i e_m)^T`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::encoder::{dot, EncoderError, FeatureVector, LinearEncoder};
use crate::kb::{EntityId, Kb};
use crate::retrieval::{build_pool, NameIndex, RetrievalError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("every mention in the batch was skipped")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{} corpus mention(s) do not match the KB: {}", .0.len(), .0.join(", "))]
    CorpusMismatch(Vec<String>),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reencode {
    PerEpoch,
    EverySteps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pool_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub reencode: Reencode,
    /// Sentences per gradient step.
    pub group_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            pool_size: 32,
            learning_rate: 0.05,
            seed: 42,
            reencode: Reencode::PerEpoch,
            group_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.pool_size == 0 || self.pool_size % 2 == 1 {
            return bad("pool size must be even and positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.group_size == 0 {
            return bad("group size must be positive");
        }
        if self.reencode == Reencode::EverySteps(0) {
            return bad("re-encode interval must be positive");
        }
        Ok(())
    }
}

/// Softmax with max-shift.
pub fn candidate_probabilities(scores: &[f64]) -> Result<Vec<f64>, TrainError> {
    let max = scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `-ln` of the probability mass on positive candidates, computed in log
/// space. `None` when no candidate is positive.
pub fn mml_loss_from_scores(scores: &[f64], positive: &[bool]) -> Result<Option<f64>, TrainError> {
    if scores.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    if !positive.iter().any(|&p| p) {
        return Ok(None);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let all: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let pos: f64 = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(s, _)| (s - max).exp())
        .sum();
    Ok(Some((all.ln() - pos.ln()).max(0.0)))
}

/// One mention and its pool, as feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mention: FeatureVector,
    pub candidates: Vec<FeatureVector>,
    pub positive: Vec<bool>,
}

pub fn example_scores(enc: &LinearEncoder, ex: &Example) -> Result<Vec<f64>, TrainError> {
    let em = enc.encode(&ex.mention)?;
    ex.candidates
        .iter()
        .map(|c| Ok(dot(&em.0, &enc.encode(c)?.0)))
        .collect()
}

pub fn mml_loss(enc: &LinearEncoder, ex: &Example) -> Result<Option<f64>, TrainError> {
    mml_loss_from_scores(&example_scores(enc, ex)?, &ex.positive)
}

/// Sparse gradient of the mean loss over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub rows: BTreeMap<u32, Vec<f64>>,
    /// Per-example loss; `None` for skipped examples.
    pub losses: Vec<Option<f64>>,
}

impl BatchGradient {
    pub fn used(&self) -> usize {
        self.losses.iter().flatten().count()
    }

    pub fn skipped(&self) -> usize {
        self.losses.len() - self.used()
    }

    pub fn mean_loss(&self) -> f64 {
        let used = self.used();
        if used == 0 {
            return 0.0;
        }
        self.losses.iter().flatten().sum::<f64>() / used as f64
    }
}

fn add_outer(rows: &mut BTreeMap<u32, Vec<f64>>, fv: &FeatureVector, v: &[f64], scale: f64) {
    for &(j, x) in fv.entries() {
        let row = rows.entry(j).or_insert_with(|| vec![0.0; v.len()]);
        for (r, d) in row.iter_mut().zip(v) {
            *r += scale * x * d;
        }
    }
}

type ExampleGradient = Option<(f64, BTreeMap<u32, Vec<f64>>)>;

fn example_gradient(enc: &LinearEncoder, ex: &Example) -> Result<ExampleGradient, TrainError> {
    let em = enc.encode(&ex.mention)?.0;
    let ec: Vec<Vec<f64>> = ex
        .candidates
        .iter()
        .map(|c| enc.encode(c).map(|e| e.0))
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = ec.iter().map(|e| dot(&em, e)).collect();
    let Some(loss) = mml_loss_from_scores(&scores, &ex.positive)? else {
        return Ok(None);
    };
    let p = candidate_probabilities(&scores)?;
    let pos_mass: f64 = p.iter().zip(&ex.positive).filter(|(_, &b)| b).map(|(x, _)| x).sum();
    let g: Vec<f64> = p
        .iter()
        .zip(&ex.positive)
        .map(|(&pi, &b)| if b { pi - pi / pos_mass } else { pi })
        .collect();

    let dim = em.len();
    let mut d_em = vec![0.0; dim];
    for (gi, ei) in g.iter().zip(&ec) {
        for (d, e) in d_em.iter_mut().zip(ei) {
            *d += gi * e;
        }
    }
    let mut rows = BTreeMap::new();
    add_outer(&mut rows, &ex.mention, &d_em, 1.0);
    for (gi, ci) in g.iter().zip(&ex.candidates) {
        if *gi != 0.0 {
            add_outer(&mut rows, ci, &em, *gi);
        }
    }
    Ok(Some((loss, rows)))
}

/// Analytic gradient of the mean loss over the non-skipped examples.
/// Per-example gradients are computed in parallel and summed in order.
pub fn loss_gradient(enc: &LinearEncoder, batch: &[Example]) -> Result<BatchGradient, TrainError> {
    let parts: Vec<ExampleGradient> = batch
        .par_iter()
        .map(|ex| example_gradient(enc, ex))
        .collect::<Result<_, _>>()?;
    let used = parts.iter().flatten().count();
    if used == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let scale = 1.0 / used as f64;
    let mut rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut losses = Vec::with_capacity(parts.len());
    for part in parts {
        match part {
            None => losses.push(None),
            Some((loss, grad)) => {
                losses.push(Some(loss));
                for (j, g) in grad {
                    let row = rows.entry(j).or_insert_with(|| vec![0.0; g.len()]);
                    for (r, v) in row.iter_mut().zip(&g) {
                        *r += scale * v;
                    }
                }
            }
        }
    }
    Ok(BatchGradient { rows, losses })
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub skipped: usize,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mentions: usize,
    pub skipped: usize,
    pub generation: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: LinearEncoder,
    pub epochs: Vec<EpochReport>,
    pub steps: Vec<StepRecord>,
    /// Number of times the KB was re-encoded.
    pub generation: u64,
}

impl TrainOutcome {
    pub fn loss_log_tsv(&self) -> String {
        let mut s = String::from("epoch\tstep\tmean_loss\tskipped\tgeneration\n");
        for r in &self.steps {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.epoch, r.step, r.mean_loss, r.skipped, r.generation);
        }
        s
    }
}

/// Precomputed features of one training document.
struct PreparedDoc {
    mentions: Vec<FeatureVector>,
    gold: Vec<Vec<EntityId>>,
    /// Mention positions grouped by sentence, in sentence order.
    sentences: Vec<Vec<usize>>,
}

fn check_corpus(corpus: &[Document], kb: &Kb) -> Result<(), TrainError> {
    let mut problems = Vec::new();
    for doc in corpus {
        for m in &doc.mentions {
            if m.gold.is_empty() {
                problems.push(format!("{}:{}-{} has no gold entity", doc.id, m.start, m.end));
            }
            for g in &m.gold {
                if !kb.contains_entity(*g) {
                    problems.push(format!("{}:{}-{} (entity {g})", doc.id, m.start, m.end));
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::CorpusMismatch(problems))
    }
}

fn prepare(enc: &LinearEncoder, corpus: &[Document]) -> Result<Vec<PreparedDoc>, TrainError> {
    corpus
        .par_iter()
        .map(|doc| {
            let mut doc = doc.clone();
            doc.ensure_sentences();
            let mentions = (0..doc.mentions.len())
                .map(|i| enc.featurize(&doc.mentions[i].surface, Some(&doc.context(i))))
                .collect::<Result<Vec<_>, _>>()?;
            let gold = doc.mentions.iter().map(|m| m.gold.iter().copied().collect()).collect();
            let mut by_sentence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, m) in doc.mentions.iter().enumerate() {
                by_sentence.entry(m.sentence.unwrap_or(usize::MAX)).or_default().push(i);
            }
            Ok(PreparedDoc {
                mentions,
                gold,
                sentences: by_sentence.into_values().collect(),
            })
        })
        .collect()
}

fn reencode(
    enc: &LinearEncoder,
    names: &[FeatureVector],
    kb: &Kb,
    generation: u64,
) -> Result<NameIndex, TrainError> {
    let rows = names
        .par_iter()
        .map(|f| enc.encode(f))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = crate::encoder::EmbeddingMatrix::from_rows(enc.proj_dim(), rows);
    Ok(NameIndex::new(matrix, kb, generation)?)
}

/// Trains `enc` on `corpus` against `kb`. Deterministic for a given seed.
pub fn train(
    enc: LinearEncoder,
    corpus: &[Document],
    kb: &Kb,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_corpus(corpus, kb)?;
    let mut enc = enc;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { encoder: enc, epochs, steps, generation: 0 });
    }

    let docs = prepare(&enc, corpus)?;
    let names: Vec<FeatureVector> = kb
        .records()
        .par_iter()
        .map(|r| enc.featurize(&r.name, None))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut generation = 1;
    let mut index = reencode(&enc, &names, kb, generation)?;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.reencode == Reencode::PerEpoch {
            generation += 1;
            index = reencode(&enc, &names, kb, generation)?;
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0, 0);

        for &d in &order {
            let doc = &docs[d];
            if doc.mentions.is_empty() {
                continue;
            }
            let embedded = doc
                .mentions
                .iter()
                .map(|x| enc.encode(x))
                .collect::<Result<Vec<_>, _>>()?;
            let pools = build_pool(&index, &embedded, cfg.pool_size)?;

            for group in doc.sentences.chunks(cfg.group_size) {
                let batch: Vec<Example> = group
                    .iter()
                    .flatten()
                    .map(|&i| {
                        let pool = &pools[i].candidates;
                        Example {
                            mention: doc.mentions[i].clone(),
                            candidates: pool.iter().map(|c| names[c.row].clone()).collect(),
                            positive: pool.iter().map(|c| doc.gold[i].contains(&c.identifier)).collect(),
                        }
                    })
                    .collect();
                step += 1;
                match loss_gradient(&enc, &batch) {
                    Ok(grad) => {
                        loss_sum += grad.losses.iter().flatten().sum::<f64>();
                        used += grad.used();
                        skipped += grad.skipped();
                        steps.push(StepRecord {
                            epoch,
                            step,
                            mean_loss: grad.mean_loss(),
                            skipped: grad.skipped(),
                            generation,
                        });
                        enc.apply_gradient(&grad.rows, cfg.learning_rate);
                    }
                    Err(TrainError::EmptyBatch) => {
                        skipped += batch.len();
                        steps.push(StepRecord {
                            epoch,
                            step,
                            mean_loss: f64::NAN,
                            skipped: batch.len(),
                            generation,
                        });
                    }
                    Err(e) => return Err(e),
                }
                if let Reencode::EverySteps(n) = cfg.reencode {
                    if step % n == 0 {
                        generation += 1;
                        index = reencode(&enc, &names, kb, generation)?;
                        debug!("re-encoded KB at step {step} (generation {generation})");
                    }
                }
            }
        }
        let mean_loss = if used == 0 { f64::NAN } else { loss_sum / used as f64 };
        info!("epoch {epoch}: mean loss {mean_loss:.5}, {skipped} skipped");
        epochs.push(EpochReport {
            epoch,
            mean_loss,
            mentions: used + skipped,
            skipped,
            generation,
        });
    }
    Ok(TrainOutcome { encoder: enc, epochs, steps, generation })
}

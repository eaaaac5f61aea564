//! Train, index, link and score in one call.

use thiserror::Error;

use crate::corpus::Document;
use crate::encoder::{EncoderConfig, EncoderError, LinearEncoder};
use crate::evaluation::{link_corpus, recall_at_1, EvalError, EvalReport, Prediction};
use crate::homonyms::find_all_homonyms;
use crate::kb::Kb;
use crate::retrieval::{NameIndex, RetrievalError};
use crate::string_match::{estimate_affected, EstimateError};
use crate::training::{train, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

pub struct LinkingRun {
    pub training: TrainOutcome,
    pub index: NameIndex,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
}

/// Builds the index for a trained encoder. The generation is carried over
/// from training so a saved index can be matched with its checkpoint.
pub fn index_for(enc: &LinearEncoder, kb: &Kb, generation: u64) -> Result<NameIndex, PipelineError> {
    Ok(NameIndex::new(enc.encode_kb(kb)?, kb, generation)?)
}

/// Trains a fresh encoder on `train_docs`, links `test_docs` and scores
/// them. The affected/unaffected breakdown uses the homonyms of `kb`.
pub fn train_and_evaluate(
    kb: &Kb,
    train_docs: &[Document],
    test_docs: &[Document],
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
) -> Result<LinkingRun, PipelineError> {
    let enc = LinearEncoder::from_kb(enc_cfg.clone(), kb)?;
    let training = train(enc, train_docs, kb, train_cfg)?;
    let index = index_for(&training.encoder, kb, training.generation + 1)?;
    let predictions = link_corpus(&index, &training.encoder, test_docs)?;
    let affected = estimate_affected(test_docs, kb, &find_all_homonyms(kb))?.flags();
    let predicted: Vec<_> = predictions.iter().map(|p| p.entities.clone()).collect();
    let gold: Vec<_> = predictions.iter().map(|p| p.gold.clone()).collect();
    let report = recall_at_1(&predicted, &gold, Some(&affected))?;
    Ok(LinkingRun {
        training,
        index,
        predictions,
        report,
    })
}

//! End-to-end commands: training, evaluation, grounding export and the
//! gradient check suite.

mod align;
mod eval;
mod gradcheck;
mod train;

use std::path::Path;

use crate::alignment::apply_stopword_mask;
use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{load_relevance, relevance_matrix, save_relevance, tokenize, RelevanceTable, SetAggregation, TAU_ROUGE_L};
use crate::model::{ModelConfig, TokenSeq};

pub use align::{align, ground_corpus, planted_accuracy, AlignSummary, CaptionGrounding};
pub use eval::{evaluate, evaluate_params, score_matrix, EvalOutput};
pub use gradcheck::{gradcheck, GradcheckSummary};
pub use train::{train, EpochRecord, TrainSummary};

pub const BEST_CHECKPOINT: &str = "best.xtrn";
pub const LAST_CHECKPOINT: &str = "last.xtrn";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_COPY: &str = "config.toml";

/// Model config with the vocabulary size taken from `corpus` when unset,
/// checked against the corpus feature width.
pub fn resolve_model(cfg: &RunConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = corpus.vocabulary.len();
    }
    if m.vocab_size < corpus.vocabulary.len() {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than the corpus vocabulary ({})",
            m.vocab_size,
            corpus.vocabulary.len()
        )));
    }
    if m.feature_dim != corpus.feature_dim() {
        return Err(Error::Config(format!(
            "feature_dim {} does not match corpus features of width {}",
            m.feature_dim,
            corpus.feature_dim()
        )));
    }
    Ok(m)
}

pub fn load_corpus(cfg: &RunConfig, path: &Path) -> Result<Corpus> {
    Corpus::load(path, cfg.model.max_regions)
}

/// Caption `k` of image `i`, with stop-words removed from pooling if enabled.
pub fn caption_seq(corpus: &Corpus, i: usize, k: usize, stopword_masking: bool) -> Result<TokenSeq> {
    let seq = corpus.token_seq(i, k);
    if stopword_masking {
        apply_stopword_mask(&seq).map_err(|_| {
            Error::Data(format!("{} caption {k}: only stop-words", corpus.item(i).image_id))
        })
    } else {
        Ok(seq)
    }
}

/// `[images × captions]` ROUGE-L relevance, read from or written to the
/// configured cache.
pub fn corpus_relevance(cfg: &RunConfig, corpus: &Corpus) -> Result<RelevanceTable> {
    let captions: Vec<Vec<String>> = corpus
        .caption_index()
        .into_iter()
        .map(|(i, k)| tokenize(&corpus.item(i).captions[k].text))
        .collect();
    let (k, l) = (corpus.len(), captions.len());
    let tau = match cfg.eval.relevance_aggregation {
        SetAggregation::Max => format!("{TAU_ROUGE_L}/max"),
        SetAggregation::Mean => format!("{TAU_ROUGE_L}/mean"),
    };
    if let Some(cache) = &cfg.paths.relevance_cache {
        if cache.exists() {
            if let Some(t) = load_relevance(cache, k, l, &tau)? {
                return Ok(t);
            }
        }
    }
    let sets: Vec<Vec<Vec<String>>> = (0..k)
        .map(|i| corpus.item(i).captions.iter().map(|c| tokenize(&c.text)).collect())
        .collect();
    let table = relevance_matrix(&sets, &captions, cfg.eval.relevance_aggregation)?;
    if let Some(cache) = &cfg.paths.relevance_cache {
        save_relevance(cache, &table, &tau)?;
    }
    Ok(table)
}

use std::path::Path;

use crate::alignment::{alignment_matrix, pool, PoolingKind};
use crate::config::{Precision, RunConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{ensemble_scores, evaluate as retrieval_metrics, RelevanceTable, RetrievalReport};
use crate::model::checkpoint;
use crate::model::{ContextualizedSet, TeranParams};
use crate::numerics::{Real, Tensor};

use super::{caption_seq, corpus_relevance, load_corpus, resolve_model};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: RetrievalReport,
    /// `[images × captions]` scores the report was computed from.
    pub scores: Tensor<f64>,
    pub images_encoded: usize,
    pub captions_encoded: usize,
}

/// Pooled similarity of every image against every caption, rows computed
/// in parallel.
pub fn score_matrix<T: Real>(
    images: &[ContextualizedSet<T>],
    captions: &[ContextualizedSet<T>],
    kind: PoolingKind,
) -> Result<Tensor<f64>> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Usage("nothing to score".into()));
    }
    let l = captions.len();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(images.len());
    let chunk = images.len().div_ceil(workers);
    let mut data = vec![0.0f64; images.len() * l];
    std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks_mut(chunk * l)
            .zip(images.chunks(chunk))
            .map(|(out, imgs)| {
                s.spawn(move || -> Result<()> {
                    for (row, v) in out.chunks_mut(l).zip(imgs) {
                        for (cell, c) in row.iter_mut().zip(captions) {
                            *cell = pool(&alignment_matrix(v, c)?, kind)?.to_f64().expect("finite");
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("scoring worker panicked"))
    })?;
    Tensor::new(vec![images.len(), l], data)
}

/// Encodes every image and caption of `corpus` exactly once and scores them.
fn corpus_scores<T: Real>(
    params: &TeranParams<T>,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(Tensor<f64>, usize, usize)> {
    let regions: Vec<_> = corpus.regions.iter().map(|r| r.cast::<T>()).collect();
    let images = params.encode_regions_batch(&regions)?;
    let seqs = corpus
        .caption_index()
        .into_iter()
        .map(|(i, k)| caption_seq(corpus, i, k, cfg.training.stopword_masking))
        .collect::<Result<Vec<_>>>()?;
    let captions = params.encode_words_batch(&seqs)?;
    let scores = score_matrix(&images, &captions, cfg.training.pooling)?;
    Ok((scores, images.len(), captions.len()))
}

fn caption_owners(corpus: &Corpus) -> Vec<usize> {
    corpus.caption_index().into_iter().map(|(i, _)| i).collect()
}

/// Retrieval metrics of one model on `corpus`; `other` is ensembled in by
/// averaging scores.
pub fn evaluate_params<T: Real>(
    params: &TeranParams<T>,
    other: Option<&TeranParams<T>>,
    corpus: &Corpus,
    relevance: &RelevanceTable,
    cfg: &RunConfig,
) -> Result<EvalOutput> {
    let (mut scores, mut images, mut captions) = corpus_scores(params, corpus, cfg)?;
    if let Some(b) = other {
        let (sb, ib, cb) = corpus_scores(b, corpus, cfg)?;
        scores = ensemble_scores(&scores, &sb)?;
        images += ib;
        captions += cb;
    }
    let report = retrieval_metrics(&scores, &caption_owners(corpus), relevance, cfg.eval.ndcg_p)?;
    Ok(EvalOutput {
        report,
        scores,
        images_encoded: images,
        captions_encoded: captions,
    })
}

fn evaluate_as<T: Real>(cfg: &RunConfig, ckpt: &Path, ckpt_b: Option<&Path>) -> Result<EvalOutput> {
    let corpus = load_corpus(cfg, cfg.eval_manifest()?)?;
    let model = resolve_model(cfg, &corpus)?;
    let a = checkpoint::load::<T>(ckpt, &model)?.params;
    let b = ckpt_b.map(|p| checkpoint::load::<T>(p, &model)).transpose()?.map(|c| c.params);
    let relevance = corpus_relevance(cfg, &corpus)?;
    evaluate_params(&a, b.as_ref(), &corpus, &relevance, cfg)
}

/// Scores the evaluation corpus with one checkpoint, or the average of two.
pub fn evaluate(cfg: &RunConfig, ckpt: &Path, ckpt_b: Option<&Path>) -> Result<EvalOutput> {
    match cfg.precision {
        Precision::F32 => evaluate_as::<f32>(cfg, ckpt, ckpt_b),
        Precision::F64 => evaluate_as::<f64>(cfg, ckpt, ckpt_b),
    }
}

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{apply_stopword_mask, batch_similarity_on};
use crate::config::{Precision, RunConfig};
use crate::data::{Batch, Batcher, Corpus};
use crate::encoder::ForwardCtx;
use crate::error::{Error, Result};
use crate::metrics::{RelevanceTable, RetrievalReport};
use crate::model::checkpoint::{self, Progress};
use crate::model::{ModelConfig, TeranParams};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{Real, Tape, Var};
use crate::objective::{adam_step, triplet_loss_on, AdamState};

use super::{
    corpus_relevance, evaluate_params, load_corpus, resolve_model, BEST_CHECKPOINT, CONFIG_COPY, LAST_CHECKPOINT,
    TRAIN_LOG,
};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub mean_loss: f64,
    pub validation: RetrievalReport,
    /// Mean NDCG over both directions; selects the best checkpoint.
    pub score: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub best_score: f64,
    pub model: ModelConfig,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Mean NDCG of both retrieval directions.
pub fn selection_score(r: &RetrievalReport) -> f64 {
    0.5 * (r.image_retrieval.ndcg_rouge_l + r.sentence_retrieval.ndcg_rouge_l)
}

/// One optimizer step on `batch`; returns the loss before the update.
fn step<T: Real>(
    params: &mut TeranParams<T>,
    adam: &mut AdamState<T>,
    batch: &Batch,
    cfg: &RunConfig,
    step_index: u64,
    lr: f64,
) -> Result<f64> {
    let t = &cfg.training;
    let mut tape = Tape::new();
    let bound = params.store().bind(&mut tape);
    let mut rng = stream(cfg.seed, Stream::Dropout(step_index));
    let mut ctx = ForwardCtx::train(params.config().dropout, &mut rng);
    let mut images: Vec<Var> = Vec::with_capacity(batch.len());
    for r in &batch.regions {
        images.push(params.encode_regions_on(&mut tape, &bound, &r.cast::<T>(), &mut ctx)?);
    }
    let mut seqs = Vec::with_capacity(batch.len());
    let mut captions: Vec<Var> = Vec::with_capacity(batch.len());
    for c in &batch.tokens {
        let seq = if t.stopword_masking {
            apply_stopword_mask(c).map_err(|_| Error::Data("caption of only stop-words".into()))?
        } else {
            c.clone()
        };
        captions.push(params.encode_words_on(&mut tape, &bound, &seq, &mut ctx)?);
        seqs.push(seq);
    }
    let img: Vec<_> = images.iter().zip(&batch.regions).map(|(&v, r)| (v, &r.mask)).collect();
    let cap: Vec<_> = captions.iter().zip(&seqs).map(|(&v, s)| (v, &s.pool_mask)).collect();
    let s = batch_similarity_on(&mut tape, &img, &cap, t.pooling)?;
    let loss = triplet_loss_on(&mut tape, s, T::lit(t.margin), t.reduction)?;
    let value = tape.value(loss).item().to_f64().expect("finite");
    if !value.is_finite() {
        return Err(Error::Numeric {
            op: "train",
            detail: format!("non-finite loss at step {step_index}"),
        });
    }
    let grads = tape.backward(loss)?;
    let store = params.store_mut();
    store.zero_grad();
    store.accumulate(&grads, &bound)?;
    adam_step(store, adam, lr, &t.adam)?;
    Ok(value)
}

struct Setup<T> {
    corpus: Corpus,
    validation: Option<Corpus>,
    relevance: RelevanceTable,
    params: TeranParams<T>,
    adam: AdamState<T>,
    progress: Progress,
}

fn setup<T: Real>(cfg: &RunConfig, resume: Option<&Path>) -> Result<Setup<T>> {
    let corpus = load_corpus(cfg, cfg.train_manifest()?)?;
    let model = resolve_model(cfg, &corpus)?;
    let validation = match &cfg.paths.validation_manifest {
        Some(p) => {
            let v = load_corpus(cfg, p)?;
            resolve_model(cfg, &v)?;
            Some(v)
        }
        None => None,
    };
    let relevance = corpus_relevance(cfg, validation.as_ref().unwrap_or(&corpus))?;
    let (params, adam, progress) = match resume {
        Some(path) => {
            let ck = checkpoint::load::<T>(path, &model)?;
            let adam = ck.optimizer.unwrap_or_else(|| AdamState::new(ck.params.store()));
            (ck.params, adam, ck.progress)
        }
        None => {
            let p = TeranParams::<T>::init(&model, cfg.seed)?;
            let adam = AdamState::new(p.store());
            (p, adam, Progress::default())
        }
    };
    Ok(Setup {
        corpus,
        validation,
        relevance,
        params,
        adam,
        progress,
    })
}

fn train_as<T: Real>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let Setup {
        corpus,
        validation,
        relevance,
        mut params,
        mut adam,
        mut progress,
    } = setup::<T>(cfg, resume)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut copy = cfg.clone();
    copy.model = params.config().clone();
    std::fs::write(out.join(CONFIG_COPY), copy.to_toml()).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let batcher = Batcher::new(&corpus, cfg.training.batch_size, cfg.seed)?;
    if batcher.batches_per_epoch() == 0 {
        return Err(Error::Data(format!(
            "corpus of {} images yields no batch of size {}",
            corpus.len(),
            cfg.training.batch_size
        )));
    }
    let limit = cfg.training.max_steps;
    let best_path = out.join(BEST_CHECKPOINT);
    let last_path = out.join(LAST_CHECKPOINT);
    let mut epochs = Vec::new();
    let start = progress.epochs_done as usize;
    for epoch in start..cfg.training.epochs {
        if limit > 0 && progress.steps_done >= limit {
            break;
        }
        let lr = cfg.training.schedule.at(epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batcher.epoch(epoch as u64) {
            if limit > 0 && progress.steps_done >= limit {
                break;
            }
            total += step(&mut params, &mut adam, &batch, cfg, progress.steps_done, lr)?;
            count += 1;
            progress.steps_done += 1;
        }
        progress.epochs_done = epoch as u32 + 1;
        let val = evaluate_params(&params, None, validation.as_ref().unwrap_or(&corpus), &relevance, cfg)?;
        let score = selection_score(&val.report);
        let best = score > progress.best_score;
        if best {
            progress.best_score = score;
            checkpoint::save(&best_path, &params, progress, None)?;
        }
        checkpoint::save(&last_path, &params, progress, Some(&adam))?;
        let record = EpochRecord {
            epoch,
            steps: progress.steps_done,
            lr,
            mean_loss: total / count.max(1) as f64,
            validation: val.report,
            score,
            best,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        on_epoch(&record);
        epochs.push(record);
    }
    if !last_path.exists() {
        checkpoint::save(&last_path, &params, progress, Some(&adam))?;
    }
    Ok(TrainSummary {
        epochs,
        steps: progress.steps_done,
        best_score: progress.best_score,
        model: params.config().clone(),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Trains into `out`, optionally resuming from a checkpoint written by an
/// earlier run with the same configuration.
pub fn train(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, out, resume, on_epoch),
        Precision::F64 => train_as::<f64>(cfg, out, resume, on_epoch),
    }
}

use std::path::{Path, PathBuf};

use crate::alignment::{alignment_matrix, export_groundings, write_groundings, Grounding};
use crate::config::{Precision, RunConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::TeranParams;
use crate::numerics::Real;

use super::{caption_seq, load_corpus, resolve_model};

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionGrounding {
    pub image: usize,
    pub caption: usize,
    pub records: Vec<Grounding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignSummary {
    pub files: Vec<PathBuf>,
    /// Words with a planted region, and how many grounded onto it.
    pub planted_words: usize,
    pub planted_correct: usize,
}

impl AlignSummary {
    pub fn accuracy(&self) -> Option<f64> {
        (self.planted_words > 0).then(|| self.planted_correct as f64 / self.planted_words as f64)
    }
}

/// Word-to-region groundings for every caption of the listed images.
pub fn ground_corpus<T: Real>(
    params: &TeranParams<T>,
    corpus: &Corpus,
    images: &[usize],
    stopword_masking: bool,
) -> Result<Vec<CaptionGrounding>> {
    let mut out = Vec::new();
    for &i in images {
        let r = corpus.regions[i].cast::<T>();
        let v = params.encode_regions(&r)?;
        for k in 0..corpus.item(i).captions.len() {
            let s = params.encode_words(&caption_seq(corpus, i, k, stopword_masking)?)?;
            let a = alignment_matrix(&v, &s)?;
            let records = export_groundings(&a, &corpus.tokens(i, k), &r.boxes)?;
            out.push(CaptionGrounding {
                image: i,
                caption: k,
                records,
            });
        }
    }
    Ok(out)
}

/// `(words with planted truth, correctly grounded)` over `groundings`.
pub fn planted_accuracy(corpus: &Corpus, groundings: &[CaptionGrounding]) -> (usize, usize) {
    let (mut total, mut correct) = (0, 0);
    for g in groundings {
        let Some(planted) = &corpus.item(g.image).captions[g.caption].planted_regions else {
            continue;
        };
        for rec in &g.records {
            if let Some(p) = planted[rec.word_index] {
                total += 1;
                correct += usize::from(p == rec.region_index);
            }
        }
    }
    (total, correct)
}

fn align_as<T: Real>(cfg: &RunConfig, ckpt: &Path, ids: &[String], out: &Path) -> Result<AlignSummary> {
    let corpus = load_corpus(cfg, cfg.eval_manifest()?)?;
    let model = resolve_model(cfg, &corpus)?;
    let params = checkpoint::load::<T>(ckpt, &model)?.params;
    let images = if ids.is_empty() {
        (0..corpus.len()).collect()
    } else {
        ids.iter()
            .map(|id| corpus.find(id).ok_or_else(|| Error::Data(format!("unknown image id {id:?}"))))
            .collect::<Result<Vec<_>>>()?
    };
    let groundings = ground_corpus(&params, &corpus, &images, cfg.training.stopword_masking)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::with_capacity(groundings.len());
    for g in &groundings {
        let path = out.join(format!("{}.caption{}.jsonl", corpus.item(g.image).image_id, g.caption));
        let mut buf = Vec::new();
        write_groundings(&mut buf, &g.records).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    let (planted_words, planted_correct) = planted_accuracy(&corpus, &groundings);
    Ok(AlignSummary {
        files,
        planted_words,
        planted_correct,
    })
}

/// Writes one grounding file per caption of the selected images (all when
/// `ids` is empty) into `out`.
pub fn align(cfg: &RunConfig, ckpt: &Path, ids: &[String], out: &Path) -> Result<AlignSummary> {
    match cfg.precision {
        Precision::F32 => align_as::<f32>(cfg, ckpt, ids, out),
        Precision::F64 => align_as::<f64>(cfg, ckpt, ids, out),
    }
}

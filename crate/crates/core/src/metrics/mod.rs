//! Retrieval evaluation: Recall@K, NDCG@p with caption-similarity relevance,
//! and score-level ensembling.

mod relevance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub use relevance::{
    load_relevance, relevance_matrix, save_relevance, tokenize, QueryKind, RelevanceTable, SetAggregation,
    TAU_ROUGE_L, TOKENIZER_VERSION,
};

pub const DEFAULT_NDCG_P: usize = 25;

fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with equal weight on precision and recall.
pub fn rouge_l<S: PartialEq>(candidate: &[S], reference: &[S]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Usage("rouge_l of an empty sequence".into()));
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Relevance of `query` against every caption of one image.
pub fn caption_set_relevance<S: PartialEq>(captions: &[Vec<S>], query: &[S], agg: SetAggregation) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::Usage("empty caption set".into()));
    }
    let mut best = f64::NEG_INFINITY;
    let mut total = 0.0;
    for c in captions {
        let s = rouge_l(query, c)?;
        best = best.max(s);
        total += s;
    }
    Ok(match agg {
        SetAggregation::Max => best,
        SetAggregation::Mean => total / captions.len() as f64,
    })
}

/// Documents of one query, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub order: Vec<usize>,
}

impl RankedList {
    /// Sorts by descending score; equal scores keep ascending index order.
    pub fn from_scores<T: Real>(scores: &[T]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (scores[a].to_f64().unwrap_or(f64::NAN), scores[b].to_f64().unwrap_or(f64::NAN));
            y.total_cmp(&x).then(a.cmp(&b))
        });
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Zero-based rank of every document.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (r, &d) in self.order.iter().enumerate() {
            pos[d] = r;
        }
        pos
    }
}

fn dcg(gains: impl Iterator<Item = f64>, p: usize) -> f64 {
    gains
        .take(p)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG over the first `p` positions; `rels[d]` is the relevance of document `d`.
pub fn ndcg(ranked: &RankedList, rels: &[f64], p: usize) -> Result<f64> {
    if p == 0 {
        return Err(Error::Usage("ndcg cutoff must be at least 1".into()));
    }
    if rels.len() != ranked.len() {
        return Err(Error::shape("ndcg", &[ranked.len()], &[rels.len()]));
    }
    let mut ideal = rels.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter(), p);
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(ranked.order.iter().map(|&d| rels[d]), p) / idcg)
}

/// Fraction of queries with a ground-truth document in the top `k`.
pub fn recall_at_k(ranked: &[RankedList], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Usage("recall cutoff must be at least 1".into()));
    }
    if ranked.len() != truth.len() || ranked.is_empty() {
        return Err(Error::shape("recall_at_k", &[ranked.len()], &[truth.len()]));
    }
    let mut hits = 0usize;
    for (list, gt) in ranked.iter().zip(truth) {
        if gt.is_empty() {
            return Err(Error::Usage("query without ground truth".into()));
        }
        let pos = list.positions();
        let best = gt
            .iter()
            .map(|&d| pos.get(d).copied().ok_or_else(|| Error::Usage(format!("document {d} not ranked"))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .min()
            .expect("nonempty");
        hits += usize::from(best < k);
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Elementwise mean of two score matrices.
pub fn ensemble_scores<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ensemble_scores", a.shape(), b.shape()));
    }
    let half = T::lit(0.5);
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x + y) * half).collect(),
    )
}

/// Metrics for one retrieval direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    #[serde(rename = "r@1")]
    pub r1: f64,
    #[serde(rename = "r@5")]
    pub r5: f64,
    #[serde(rename = "r@10")]
    pub r10: f64,
    pub ndcg_rouge_l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_retrieval: DirectionReport,
    pub sentence_retrieval: DirectionReport,
}

fn direction(lists: &[RankedList], truth: &[Vec<usize>], rels: &[Vec<f64>], p: usize) -> Result<DirectionReport> {
    let mut total = 0.0;
    for (list, r) in lists.iter().zip(rels) {
        total += ndcg(list, r, p)?;
    }
    Ok(DirectionReport {
        r1: recall_at_k(lists, truth, 1)?,
        r5: recall_at_k(lists, truth, 5)?,
        r10: recall_at_k(lists, truth, 10)?,
        ndcg_rouge_l: total / lists.len() as f64,
    })
}

/// Both retrieval directions from one `[images × captions]` score matrix.
///
/// `caption_image[j]` is the image caption `j` belongs to; `relevance` is the
/// `[images × captions]` caption-set relevance.
pub fn evaluate<T: Real>(
    scores: &Tensor<T>,
    caption_image: &[usize],
    relevance: &RelevanceTable,
    p: usize,
) -> Result<RetrievalReport> {
    let (k, l) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || caption_image.len() != l || relevance.shape() != (k, l) {
        return Err(Error::shape("evaluate", scores.shape(), &[relevance.shape().0, relevance.shape().1]));
    }
    if let Some(&bad) = caption_image.iter().find(|&&i| i >= k) {
        return Err(Error::Data(format!("caption refers to image {bad} of {k}")));
    }
    let column = |j: usize| (0..k).map(|i| scores.at(i, j)).collect::<Vec<T>>();
    let image_lists: Vec<RankedList> = (0..l).map(|j| RankedList::from_scores(&column(j))).collect();
    let image_truth: Vec<Vec<usize>> = caption_image.iter().map(|&i| vec![i]).collect();
    let image_rels: Vec<Vec<f64>> = (0..l).map(|j| relevance.column(j)).collect();

    let sentence_lists: Vec<RankedList> = (0..k).map(|i| RankedList::from_scores(scores.row(i))).collect();
    let mut sentence_truth = vec![Vec::new(); k];
    for (j, &i) in caption_image.iter().enumerate() {
        sentence_truth[i].push(j);
    }
    let sentence_rels: Vec<Vec<f64>> = (0..k).map(|i| relevance.row(i)).collect();

    Ok(RetrievalReport {
        image_retrieval: direction(&image_lists, &image_truth, &image_rels, p)?,
        sentence_retrieval: direction(&sentence_lists, &sentence_truth, &sentence_rels, p)?,
    })
}

#[cfg(test)]
mod tests;

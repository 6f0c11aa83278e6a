//! Region-word cosine alignment and its pooled image-sentence scores.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::PadMask;
use crate::error::{Error, Result};
use crate::model::{ContextualizedSet, TokenSeq};
use crate::numerics::{argmax, cosine_raw, Real, Tape, Tensor, Var, COSINE_EPS};

/// How an alignment matrix collapses into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    /// Max over regions, sum over words.
    #[default]
    MrSw,
    /// Max over words, sum over regions.
    MwSr,
    /// `MrSw + MwSr`.
    Symm,
    /// Max over regions, mean over words.
    MrAvgW,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 4] = [Self::MrSw, Self::MwSr, Self::Symm, Self::MrAvgW];

    pub fn name(self) -> &'static str {
        match self {
            Self::MrSw => "mrsw",
            Self::MwSr => "mwsr",
            Self::Symm => "symm",
            Self::MrAvgW => "mravgw",
        }
    }
}

/// Cosine similarities between every region (rows) and word (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix<T> {
    pub values: Tensor<T>,
    pub region_mask: PadMask,
    pub word_mask: PadMask,
}

impl<T: Real> AlignmentMatrix<T> {
    pub fn new(values: Tensor<T>, region_mask: PadMask, word_mask: PadMask) -> Result<Self> {
        if values.shape() != [region_mask.len(), word_mask.len()] {
            return Err(Error::shape(
                "alignment_matrix",
                values.shape(),
                &[region_mask.len(), word_mask.len()],
            ));
        }
        Ok(Self {
            values,
            region_mask,
            word_mask,
        })
    }

    pub fn at(&self, region: usize, word: usize) -> T {
        self.values.at(region, word)
    }
}

pub fn alignment_matrix<T: Real>(v: &ContextualizedSet<T>, s: &ContextualizedSet<T>) -> Result<AlignmentMatrix<T>> {
    let (n, m) = (v.len(), s.len());
    if v.vectors.cols() != s.vectors.cols() {
        return Err(Error::shape("alignment_matrix", v.vectors.shape(), s.vectors.shape()));
    }
    let eps = T::lit(COSINE_EPS);
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(cosine_raw(v.vectors.row(i), s.vectors.row(j), eps));
        }
    }
    AlignmentMatrix::new(
        Tensor::new(vec![n, m], data)?,
        v.mask.clone(),
        s.mask.clone(),
    )
}

fn real_indices(mask: &PadMask) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask.is_real(i)).collect()
}

/// Pools one block and records which entries carry the result:
/// `(row, col, coefficient)` with the score equal to `Σ coef · A[row][col]`.
fn pool_block<T: Real>(
    at: impl Fn(usize, usize) -> T,
    rows: &[usize],
    cols: &[usize],
    kind: PoolingKind,
    mut routes: Option<&mut Vec<(usize, usize, T)>>,
) -> Result<T> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Usage("pooling over a fully masked axis".into()));
    }
    let max_over_regions = |routes: &mut Option<&mut Vec<(usize, usize, T)>>, coef: T| {
        let mut total = T::zero();
        for &j in cols {
            let (i, v) = argmax(rows.iter().map(|&i| (i, at(i, j)))).expect("nonempty");
            total = total + v;
            if let Some(r) = routes.as_deref_mut() {
                r.push((i, j, coef));
            }
        }
        total
    };
    let mrsw = max_over_regions(&mut routes, T::one());
    let score = match kind {
        PoolingKind::MrSw => mrsw,
        PoolingKind::MrAvgW => {
            let count = T::lit(cols.len() as f64);
            if let Some(r) = routes.as_deref_mut() {
                let start = r.len() - cols.len();
                for route in &mut r[start..] {
                    route.2 = T::one() / count;
                }
            }
            mrsw / count
        }
        PoolingKind::MwSr | PoolingKind::Symm => {
            if kind == PoolingKind::MwSr {
                if let Some(r) = routes.as_deref_mut() {
                    let start = r.len() - cols.len();
                    r.truncate(start);
                }
            }
            let mut mwsr = T::zero();
            for &i in rows {
                let (j, v) = argmax(cols.iter().map(|&j| (j, at(i, j)))).expect("nonempty");
                mwsr = mwsr + v;
                if let Some(r) = routes.as_deref_mut() {
                    r.push((i, j, T::one()));
                }
            }
            if kind == PoolingKind::MwSr {
                mwsr
            } else {
                mrsw + mwsr
            }
        }
    };
    Ok(score)
}

/// Pooled similarity over the unmasked part of `a`.
pub fn pool<T: Real>(a: &AlignmentMatrix<T>, kind: PoolingKind) -> Result<T> {
    let rows = real_indices(&a.region_mask);
    let cols = real_indices(&a.word_mask);
    pool_block(|i, j| a.at(i, j), &rows, &cols, kind, None)
}

/// `S[k][l] = pool(alignment_matrix(images[k], captions[l]))`.
pub fn similarity_matrix<T: Real>(
    images: &[ContextualizedSet<T>],
    captions: &[ContextualizedSet<T>],
    kind: PoolingKind,
) -> Result<Tensor<T>> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Usage("similarity over an empty list".into()));
    }
    let mut data = Vec::with_capacity(images.len() * captions.len());
    for v in images {
        for s in captions {
            data.push(pool(&alignment_matrix(v, s)?, kind)?);
        }
    }
    Tensor::new(vec![images.len(), captions.len()], data)
}

/// Differentiable `[K × L]` similarity for a training batch.
///
/// Rows of every element are L2-normalized, one product yields all
/// alignment blocks, and pooling routes each score to its selected entries.
pub fn batch_similarity_on<T: Real>(
    tape: &mut Tape<T>,
    images: &[(Var, &PadMask)],
    captions: &[(Var, &PadMask)],
    kind: PoolingKind,
) -> Result<Var> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Usage("similarity over an empty batch".into()));
    }
    let eps = T::lit(COSINE_EPS);
    let stack = |tape: &mut Tape<T>, parts: &[(Var, &PadMask)]| -> Result<(Var, Vec<usize>)> {
        let mut offsets = Vec::with_capacity(parts.len() + 1);
        let mut total = 0;
        for (v, mask) in parts {
            if tape.shape(*v)[0] != mask.len() {
                return Err(Error::shape("batch_similarity", tape.shape(*v), &[mask.len()]));
            }
            offsets.push(total);
            total += mask.len();
        }
        offsets.push(total);
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let joined = if vars.len() == 1 { vars[0] } else { tape.concat_rows(&vars)? };
        Ok((tape.normalize_rows(joined, eps)?, offsets))
    };
    let (regions, row_off) = stack(tape, images)?;
    let (words, col_off) = stack(tape, captions)?;
    let wt = tape.transpose(words)?;
    let a = tape.matmul(regions, wt)?;
    let width = col_off[captions.len()];
    let values = tape.value(a);
    let (kk, ll) = (images.len(), captions.len());
    let mut routes = Vec::new();
    let mut block = Vec::new();
    for (k, (_, rmask)) in images.iter().enumerate() {
        let rows: Vec<usize> = real_indices(rmask).into_iter().map(|i| i + row_off[k]).collect();
        for (l, (_, cmask)) in captions.iter().enumerate() {
            let cols: Vec<usize> = real_indices(cmask).into_iter().map(|j| j + col_off[l]).collect();
            block.clear();
            pool_block(|i, j| values.at(i, j), &rows, &cols, kind, Some(&mut block))?;
            routes.extend(block.iter().map(|&(i, j, c)| (i * width + j, k * ll + l, c)));
        }
    }
    tape.sparse_linear(a, vec![kk, ll], routes)
}

/// Clears stop-flagged words from the pooling mask; the encoder still sees
/// them through `mask`.
pub fn apply_stopword_mask(c: &TokenSeq) -> Result<TokenSeq> {
    let pool_mask = c.pool_mask.without(&c.stop_flags);
    if pool_mask.count_real() == 0 {
        return Err(Error::Usage("caption consists only of stop-words".into()));
    }
    Ok(TokenSeq {
        pool_mask,
        ..c.clone()
    })
}

/// The region a word aligns to most strongly.
#[derive(Clone, Debug, PartialEq)]
pub struct Grounding {
    pub token: String,
    pub word_index: usize,
    pub region_index: usize,
    pub bbox: [f32; 4],
    pub score: f64,
}

impl Grounding {
    /// One JSON object; box and score printed with 6 decimals.
    pub fn to_json_line(&self) -> String {
        let b = self.bbox;
        format!(
            "{{\"token\":{},\"word_index\":{},\"region_index\":{},\"box\":[{:.6},{:.6},{:.6},{:.6}],\"score\":{:.6}}}",
            serde_json::to_string(&self.token).expect("string"),
            self.word_index,
            self.region_index,
            b[0],
            b[1],
            b[2],
            b[3],
            self.score
        )
    }
}

pub fn export_groundings<T: Real>(a: &AlignmentMatrix<T>, tokens: &[String], boxes: &[[f32; 4]]) -> Result<Vec<Grounding>> {
    if tokens.len() != a.word_mask.len() || boxes.len() != a.region_mask.len() {
        return Err(Error::shape(
            "export_groundings",
            a.values.shape(),
            &[boxes.len(), tokens.len()],
        ));
    }
    let rows = real_indices(&a.region_mask);
    if rows.is_empty() {
        return Err(Error::Usage("no real regions to ground words on".into()));
    }
    Ok(real_indices(&a.word_mask)
        .into_iter()
        .map(|j| {
            let (i, v) = argmax(rows.iter().map(|&i| (i, a.at(i, j)))).expect("nonempty");
            Grounding {
                token: tokens[j].clone(),
                word_index: j,
                region_index: i,
                bbox: boxes[i],
                score: v.to_f64().expect("finite"),
            }
        })
        .collect())
}

pub fn write_groundings(mut out: impl Write, records: &[Grounding]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;

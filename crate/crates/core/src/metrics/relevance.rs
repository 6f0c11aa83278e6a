//! Caption-similarity relevance tables and their on-disk cache.
//!
//! Cache layout, little-endian:
//!
//! ```text
//! "XREL" | u32 version | u32 query kind (0 caption retrieval, 1 image retrieval)
//! u32 queries | u32 documents | string tau name | u32 tokenizer version
//! queries * documents f32, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::caption_set_relevance;
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XREL";
const VERSION: u32 = 1;
pub const TAU_ROUGE_L: &str = "rouge-l";
pub const TOKENIZER_VERSION: u32 = 1;

/// Lowercases, splits on whitespace and strips punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// How a query is scored against a set of reference captions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetAggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    /// Images are queries, captions are documents.
    CaptionRetrieval,
    /// Captions are queries, images are documents.
    ImageRetrieval,
}

/// `[queries × documents]` relevance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceTable {
    pub kind: QueryKind,
    queries: usize,
    documents: usize,
    values: Vec<f32>,
}

impl RelevanceTable {
    pub fn new(kind: QueryKind, queries: usize, documents: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != queries * documents {
            return Err(Error::shape("relevance_table", &[queries, documents], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("relevance {v} outside [0, 1]")));
        }
        Ok(Self {
            kind,
            queries,
            documents,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.queries, self.documents)
    }

    pub fn get(&self, query: usize, document: usize) -> f32 {
        self.values[query * self.documents + document]
    }

    pub fn row(&self, query: usize) -> Vec<f64> {
        self.values[query * self.documents..(query + 1) * self.documents]
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    pub fn column(&self, document: usize) -> Vec<f64> {
        (0..self.queries).map(|q| f64::from(self.get(q, document))).collect()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The same relevances with queries and documents swapped.
    pub fn transposed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for d in 0..self.documents {
            for q in 0..self.queries {
                values.push(self.get(q, d));
            }
        }
        Self {
            kind: match self.kind {
                QueryKind::CaptionRetrieval => QueryKind::ImageRetrieval,
                QueryKind::ImageRetrieval => QueryKind::CaptionRetrieval,
            },
            queries: self.documents,
            documents: self.queries,
            values,
        }
    }
}

/// `R[i][j] = τ(captions of image i, caption j)` as a caption-retrieval
/// table, computed in parallel over image rows.
pub fn relevance_matrix<S: PartialEq + Sync>(
    image_captions: &[Vec<Vec<S>>],
    captions: &[Vec<S>],
    agg: SetAggregation,
) -> Result<RelevanceTable> {
    let (k, l) = (image_captions.len(), captions.len());
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(k.max(1));
    let chunk = k.div_ceil(workers.max(1)).max(1);
    let mut values = vec![0f32; k * l];
    std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .chunks_mut(chunk * l.max(1))
            .enumerate()
            .map(|(c, out)| {
                scope.spawn(move || -> Result<()> {
                    for (r, row) in out.chunks_mut(l.max(1)).enumerate() {
                        let set = &image_captions[c * chunk + r];
                        for (cell, q) in row.iter_mut().zip(captions) {
                            *cell = caption_set_relevance(set, q, agg)? as f32;
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("relevance worker panicked"))
    })?;
    RelevanceTable::new(QueryKind::CaptionRetrieval, k, l, values)
}

pub fn save_relevance(path: &Path, table: &RelevanceTable, tau: &str) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(match table.kind {
        QueryKind::CaptionRetrieval => 0,
        QueryKind::ImageRetrieval => 1,
    });
    w.u32(table.queries as u32);
    w.u32(table.documents as u32);
    w.string(tau);
    w.u32(TOKENIZER_VERSION);
    w.f32s(table.values.iter().copied());
    w.save(path)
}

/// Loads a cached table; `Ok(None)` when the cache was built for different
/// counts, τ or tokenizer and must be recomputed.
pub fn load_relevance(path: &Path, queries: usize, documents: usize, tau: &str) -> Result<Option<RelevanceTable>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    if r.bytes(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, not a relevance cache"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let kind = match r.u32()? {
        0 => QueryKind::CaptionRetrieval,
        1 => QueryKind::ImageRetrieval,
        other => return Err(r.error_at(8, format!("unknown query kind {other}"))),
    };
    let (q, d) = (r.u32()? as usize, r.u32()? as usize);
    let name = r.string()?;
    let tok = r.u32()?;
    if (q, d) != (queries, documents) || name != tau || tok != TOKENIZER_VERSION {
        return Ok(None);
    }
    let values = r.f32s(q * d)?;
    r.expect_end()?;
    RelevanceTable::new(kind, q, d, values).map(Some)
}

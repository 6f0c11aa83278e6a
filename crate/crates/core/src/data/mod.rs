//! Corpus ingestion, synthetic corpora and training batches.
//!
//! A corpus is a line-delimited JSON manifest. The first line is a header
//! naming the vocabulary and stop-word files; every further line is one
//! image with its feature file and captions. Relative paths resolve against
//! the manifest's directory.

mod batch;
mod features;
mod synth;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::model::{RegionSet, TokenSeq};

pub use batch::{Batch, Batcher};
pub use features::{load_region_features, save_region_features};
pub use synth::{generate_synthetic, SyntheticSpec};

pub const MANIFEST_VERSION: u32 = 1;

/// Token-per-line vocabulary; a token's id is its line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if tokens.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        Ok(Self { tokens, ids })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(read_token_list(path)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn read_token_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_token_list(path: &Path, tokens: &[String]) -> Result<()> {
    let mut text = tokens.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub vocabulary: String,
    pub stopwords: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Ground-truth region per token (`null` for fillers), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_regions: Option<Vec<Option<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image_id: String,
    pub features: String,
    pub n: usize,
    pub captions: Vec<CaptionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub items: Vec<ManifestItem>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, e: serde_json::Error| Error::Data(format!("{}:{}: {e}", path.display(), line + 1));
        let (hl, head) = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?;
        let header: ManifestHeader = serde_json::from_str(head).map_err(|e| bad(hl, e))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("{}: manifest version {}", path.display(), header.version)));
        }
        let items = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i, e)))
            .collect::<Result<Vec<ManifestItem>>>()?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            header,
            items,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = |e: serde_json::Error| Error::Data(e.to_string());
        let mut out = serde_json::to_vec(&self.header).map_err(json)?;
        out.push(b'\n');
        for item in &self.items {
            out.extend(serde_json::to_vec(item).map_err(json)?);
            out.push(b'\n');
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// A validated corpus with all region features in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocabulary: Vocabulary,
    /// Stop-word flag per vocabulary id.
    pub stopwords: Vec<bool>,
    pub regions: Vec<RegionSet<f32>>,
}

impl Corpus {
    /// Loads and checks every referenced file; feature files load in parallel.
    pub fn load(path: &Path, max_regions: usize) -> Result<Self> {
        let manifest = CorpusManifest::load(path)?;
        let vocabulary = Vocabulary::load(&manifest.resolve(&manifest.header.vocabulary))?;
        let mut stopwords = vec![false; vocabulary.len()];
        for w in read_token_list(&manifest.resolve(&manifest.header.stopwords))? {
            if let Some(id) = vocabulary.id(&w) {
                stopwords[id] = true;
            }
        }
        if manifest.items.is_empty() {
            return Err(Error::Data(format!("{}: no items", path.display())));
        }
        let paths: Vec<PathBuf> = manifest.items.iter().map(|it| manifest.resolve(&it.features)).collect();
        let regions = load_all(&paths)?;
        let corpus = Self {
            manifest,
            vocabulary,
            stopwords,
            regions,
        };
        corpus.validate(max_regions)?;
        Ok(corpus)
    }

    fn validate(&self, max_regions: usize) -> Result<()> {
        let d = self.regions[0].features.cols();
        for (item, r) in self.manifest.items.iter().zip(&self.regions) {
            let id = &item.image_id;
            if r.len() != item.n {
                return Err(Error::Data(format!("{id}: manifest says {} regions, file has {}", item.n, r.len())));
            }
            if r.len() > max_regions {
                return Err(Error::Data(format!("{id}: {} regions exceed the limit of {max_regions}", r.len())));
            }
            if r.features.cols() != d {
                return Err(Error::Data(format!("{id}: feature width {} differs from {d}", r.features.cols())));
            }
            if item.captions.is_empty() {
                return Err(Error::Data(format!("{id}: no captions")));
            }
            for (k, c) in item.captions.iter().enumerate() {
                if c.token_ids.is_empty() || tokenize(&c.text).is_empty() {
                    return Err(Error::Data(format!("{id} caption {k}: empty")));
                }
                if let Some(&t) = c.token_ids.iter().find(|&&t| t >= self.vocabulary.len()) {
                    return Err(Error::Data(format!(
                        "{id} caption {k}: token id {t} outside vocabulary of {}",
                        self.vocabulary.len()
                    )));
                }
                if let Some(p) = &c.planted_regions {
                    if p.len() != c.token_ids.len() || p.iter().flatten().any(|&i| i >= r.len()) {
                        return Err(Error::Data(format!("{id} caption {k}: bad planted regions")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.regions[0].features.cols()
    }

    pub fn item(&self, i: usize) -> &ManifestItem {
        &self.manifest.items[i]
    }

    pub fn find(&self, image_id: &str) -> Option<usize> {
        self.manifest.items.iter().position(|it| it.image_id == image_id)
    }

    pub fn token_seq(&self, item: usize, caption: usize) -> TokenSeq {
        let ids = self.manifest.items[item].captions[caption].token_ids.clone();
        let stops = ids.iter().map(|&t| self.stopwords[t]).collect();
        TokenSeq::new(ids, stops).expect("lengths match")
    }

    /// Every `(image, caption)` pair in manifest order.
    pub fn caption_index(&self) -> Vec<(usize, usize)> {
        self.manifest
            .items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| (0..it.captions.len()).map(move |k| (i, k)))
            .collect()
    }

    /// Vocabulary tokens of one caption.
    pub fn tokens(&self, item: usize, caption: usize) -> Vec<String> {
        self.manifest.items[item].captions[caption]
            .token_ids
            .iter()
            .map(|&t| self.vocabulary.token(t).expect("validated").to_string())
            .collect()
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<RegionSet<f32>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(paths.len()).max(1);
    let chunk = paths.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| load_region_features(p)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(paths.len());
        for h in handles {
            out.extend(h.join().expect("loader panicked")?);
        }
        Ok(out)
    })
}

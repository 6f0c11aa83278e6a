//! Synthetic corpora with planted region-word correspondences.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{save_region_features, write_token_list, CaptionRecord, CorpusManifest, ManifestHeader, ManifestItem, MANIFEST_VERSION};
use crate::encoder::PadMask;
use crate::error::{Error, Result};
use crate::model::RegionSet;
use crate::numerics::rng::{stream, Rng, Stream};
use crate::numerics::Tensor;

const FILLERS: [&str; 8] = ["the", "a", "of", "with", "and", "on", "in", "near"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub concept_count: usize,
    pub images: usize,
    pub captions_per_image: usize,
    pub regions_per_image: usize,
    pub words_per_caption: usize,
    /// Distinct concepts shown in (and named by) each image.
    pub concepts_per_image: usize,
    /// Size of the filler stop-word vocabulary.
    pub stopword_count: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Unnamed prototypes that background regions are noisy copies of;
    /// `0` draws every background region independently.
    pub background_prototypes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            concept_count: 8,
            images: 64,
            captions_per_image: 1,
            regions_per_image: 8,
            words_per_caption: 6,
            concepts_per_image: 4,
            stopword_count: 2,
            feature_dim: 32,
            noise_std: 0.1,
            background_prototypes: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.images == 0 || self.captions_per_image == 0 || self.feature_dim == 0 {
            return bad("images, captions_per_image and feature_dim must be positive");
        }
        if self.concepts_per_image == 0 || self.concepts_per_image > self.concept_count {
            return bad("concepts_per_image must be in 1..=concept_count");
        }
        if self.regions_per_image < self.concepts_per_image {
            return bad("regions_per_image must cover concepts_per_image");
        }
        if self.words_per_caption < self.concepts_per_image {
            return bad("words_per_caption must cover concepts_per_image");
        }
        if self.words_per_caption > self.concepts_per_image && self.stopword_count == 0 {
            return bad("filler words need stopword_count > 0");
        }
        if self.stopword_count > FILLERS.len() {
            return bad("stopword_count exceeds the filler list");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn concept_token(i: usize) -> String {
        format!("concept{i:02}")
    }
}

fn gaussian(rng: &mut Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// Distinct concept subsets while enough exist, then repeats.
fn concept_sets(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..spec.concept_count).collect();
    let available = binomial(spec.concept_count, spec.concepts_per_image);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.images);
    while out.len() < spec.images {
        let mut set: Vec<usize> = all.choose_multiple(rng, spec.concepts_per_image).copied().collect();
        set.sort_unstable();
        if (seen.len() as u128) < available && !seen.insert(set.clone()) {
            continue;
        }
        out.push(set);
    }
    out
}

/// Writes a synthetic corpus under `dir` and returns its manifest.
///
/// Vocabulary ids: fillers first, then one token per concept. Each image
/// holds one noisy prototype region per named concept plus background
/// regions drawn from unnamed prototypes, in random order; every concept word records the
/// index of its region.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synthetic);
    let d = spec.feature_dim;
    let fillers: Vec<String> = FILLERS[..spec.stopword_count].iter().map(|s| s.to_string()).collect();
    let mut vocab = fillers.clone();
    vocab.extend((0..spec.concept_count).map(SyntheticSpec::concept_token));
    let concept_id = |c: usize| spec.stopword_count + c;

    let prototypes: Vec<Vec<f64>> = (0..spec.concept_count).map(|_| gaussian(&mut rng, d, 1.0)).collect();
    let background: Vec<Vec<f64>> = (0..spec.background_prototypes).map(|_| gaussian(&mut rng, d, 1.0)).collect();
    let noisy = |rng: &mut Rng, proto: &[f64]| -> Vec<f32> {
        let noise = gaussian(rng, d, spec.noise_std);
        proto.iter().zip(noise).map(|(p, e)| (p + e) as f32).collect()
    };
    let sets = concept_sets(spec, &mut rng);
    let mut items = Vec::with_capacity(spec.images);
    for (index, concepts) in sets.iter().enumerate() {
        let n = spec.regions_per_image;
        let mut slots: Vec<Option<usize>> = concepts.iter().map(|&c| Some(c)).collect();
        slots.resize(n, None);
        slots.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * d);
        let mut boxes = Vec::with_capacity(n);
        for slot in &slots {
            match slot {
                Some(c) => data.extend(noisy(&mut rng, &prototypes[*c])),
                None if background.is_empty() => data.extend(gaussian(&mut rng, d, 1.0).into_iter().map(|x| x as f32)),
                None => {
                    let b = rng.gen_range(0..background.len());
                    data.extend(noisy(&mut rng, &background[b]));
                }
            }
            let (x, y) = (rng.gen_range(0.0..0.5f32), rng.gen_range(0.0..0.5f32));
            let (w, h) = (rng.gen_range(0.1..0.5f32), rng.gen_range(0.1..0.5f32));
            boxes.push([x, y, x + w, y + h]);
        }
        let region_of = |c: usize| slots.iter().position(|s| *s == Some(c)).expect("planted");

        let mut captions = Vec::with_capacity(spec.captions_per_image);
        for _ in 0..spec.captions_per_image {
            let mut words: Vec<Option<usize>> = concepts.iter().map(|&c| Some(c)).collect();
            words.shuffle(&mut rng);
            for _ in spec.concepts_per_image..spec.words_per_caption {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, None);
            }
            let mut token_ids = Vec::with_capacity(words.len());
            let mut planted = Vec::with_capacity(words.len());
            for w in &words {
                match w {
                    Some(c) => {
                        token_ids.push(concept_id(*c));
                        planted.push(Some(region_of(*c)));
                    }
                    None => {
                        token_ids.push(rng.gen_range(0..spec.stopword_count));
                        planted.push(None);
                    }
                }
            }
            let text = token_ids.iter().map(|&t| vocab[t].as_str()).collect::<Vec<_>>().join(" ");
            captions.push(CaptionRecord {
                token_ids,
                text,
                planted_regions: Some(planted),
            });
        }

        let image_id = format!("img{index:04}");
        let features = format!("features/{image_id}.xaln");
        let regions = RegionSet::new(Tensor::new(vec![n, d], data)?, boxes, PadMask::all(n))?;
        save_region_features(&dir.join(&features), &regions)?;
        items.push(ManifestItem {
            image_id,
            features,
            n,
            captions,
        });
    }

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_token_list(&dir.join("vocab.txt"), &vocab)?;
    write_token_list(&dir.join("stopwords.txt"), &fillers)?;
    let manifest = CorpusManifest {
        root: dir.to_path_buf(),
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            vocabulary: "vocab.txt".into(),
            stopwords: "stopwords.txt".into(),
        },
        items,
    };
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

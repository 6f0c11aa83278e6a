//! Visual and textual pipelines that map regions and words into a common
//! space.
//!
//! The two pipelines never exchange data: [`TeranParams::encode_regions`]
//! only reads a [`RegionSet`] and [`TeranParams::encode_words`] only reads a
//! [`TokenSeq`].

pub mod checkpoint;
pub mod params;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{linear, positional_encoding, EncoderStack, ForwardCtx, PadMask};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{Real, Tape, Tensor, Var};
use params::{Bound, ParamId, ParamStore};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the precomputed region features.
    pub feature_dim: usize,
    /// Width of the visual reasoning stack.
    pub model_dim: usize,
    /// Width of word embeddings and the textual reasoning stack.
    pub text_dim: usize,
    pub common_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    /// Hidden width of the bounding-box MLP.
    pub geometry_dim: usize,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub final_layers: usize,
    pub share_final: bool,
    pub dropout: f64,
    pub max_regions: usize,
    /// Embedding rows; `0` means "take it from the corpus vocabulary".
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2048,
            model_dim: 1024,
            text_dim: 768,
            common_dim: 1024,
            ffn_dim: 2048,
            heads: 8,
            geometry_dim: 256,
            visual_layers: 4,
            text_layers: 2,
            final_layers: 2,
            share_final: false,
            dropout: 0.1,
            max_regions: 36,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, d) in [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("text_dim", self.text_dim),
            ("common_dim", self.common_dim),
            ("ffn_dim", self.ffn_dim),
            ("geometry_dim", self.geometry_dim),
            ("heads", self.heads),
            ("max_regions", self.max_regions),
        ] {
            if d == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, d) in [
            ("model_dim", self.model_dim),
            ("text_dim", self.text_dim),
            ("common_dim", self.common_dim),
        ] {
            if d % self.heads != 0 {
                return bad(format!("{name} {d} not divisible by heads {}", self.heads));
            }
        }
        if self.text_dim % 2 != 0 {
            return bad("text_dim must be even for positional encoding".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("serializable");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Image regions: features, normalized `(x1, y1, x2, y2)` boxes and a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet<T> {
    pub features: Tensor<T>,
    pub boxes: Vec<[f32; 4]>,
    pub mask: PadMask,
}

impl<T: Real> RegionSet<T> {
    pub fn new(features: Tensor<T>, boxes: Vec<[f32; 4]>, mask: PadMask) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2 || boxes.len() != n || mask.len() != n {
            return Err(Error::shape("region_set", features.shape(), &[boxes.len(), mask.len()]));
        }
        for (i, b) in boxes.iter().enumerate() {
            if let Some(msg) = box_problem(b) {
                return Err(Error::Data(format!("region {i}: {msg}")));
            }
        }
        Ok(Self {
            features,
            boxes,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Appends zero regions with zero boxes, marked as padding.
    pub fn padded_to(&self, n: usize) -> Self {
        if n <= self.len() {
            return self.clone();
        }
        let d = self.features.cols();
        let mut data = self.features.data().to_vec();
        data.resize(n * d, T::zero());
        let mut boxes = self.boxes.clone();
        boxes.resize(n, [0.0; 4]);
        Self {
            features: Tensor::new(vec![n, d], data).expect("sized"),
            boxes,
            mask: self.mask.padded_to(n),
        }
    }

    pub fn cast<U: Real>(&self) -> RegionSet<U> {
        RegionSet {
            features: self.features.cast(),
            boxes: self.boxes.clone(),
            mask: self.mask.clone(),
        }
    }

    /// `(x1, y1, x2, y2, w, h, area)` per region.
    pub fn geometry(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.len() * 7);
        for b in &self.boxes {
            let [x1, y1, x2, y2] = b.map(f64::from);
            let (w, h) = (x2 - x1, y2 - y1);
            data.extend([x1, y1, x2, y2, w, h, w * h].map(T::lit));
        }
        Tensor::new(vec![self.len(), 7], data).expect("sized")
    }
}

pub(crate) fn box_problem(b: &[f32; 4]) -> Option<String> {
    if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Some(format!("box {b:?} outside [0, 1]"));
    }
    if b[2] < b[0] || b[3] < b[1] {
        return Some(format!("box {b:?} has negative extent"));
    }
    None
}

/// A tokenized caption with padding and stop-word flags.
///
/// `mask` governs attention; `pool_mask` governs which words take part in
/// similarity pooling and starts out equal to `mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub token_ids: Vec<usize>,
    pub mask: PadMask,
    pub stop_flags: Vec<bool>,
    pub pool_mask: PadMask,
}

impl TokenSeq {
    pub fn new(token_ids: Vec<usize>, stop_flags: Vec<bool>) -> Result<Self> {
        if token_ids.len() != stop_flags.len() {
            return Err(Error::shape("token_seq", &[token_ids.len()], &[stop_flags.len()]));
        }
        let mask = PadMask::all(token_ids.len());
        Ok(Self {
            token_ids,
            pool_mask: mask.clone(),
            mask,
            stop_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn padded_to(&self, m: usize, pad_id: usize) -> Self {
        if m <= self.len() {
            return self.clone();
        }
        let mut ids = self.token_ids.clone();
        ids.resize(m, pad_id);
        let mut stops = self.stop_flags.clone();
        stops.resize(m, false);
        Self {
            token_ids: ids,
            mask: self.mask.padded_to(m),
            stop_flags: stops,
            pool_mask: self.pool_mask.padded_to(m),
        }
    }
}

/// Encoder output: one common-space vector per element, plus the mask that
/// pooling should honor.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualizedSet<T> {
    pub vectors: Tensor<T>,
    pub mask: PadMask,
}

impl<T: Real> ContextualizedSet<T> {
    pub fn new(vectors: Tensor<T>, mask: PadMask) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != mask.len() {
            return Err(Error::shape("contextualized_set", vectors.shape(), &[mask.len()]));
        }
        Ok(Self { vectors, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    geometry_hidden: (ParamId, ParamId),
    geometry_out: (ParamId, ParamId),
    visual_in: (ParamId, ParamId),
    visual_stack: EncoderStack,
    visual_proj: (ParamId, ParamId),
    embedding: ParamId,
    text_stack: EncoderStack,
    text_proj: (ParamId, ParamId),
    final_visual: EncoderStack,
    final_text: EncoderStack,
}

/// All trainable state of the dual-pipeline model.
#[derive(Clone, Debug, PartialEq)]
pub struct TeranParams<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    layout: Layout,
}

fn linear_params<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut crate::numerics::rng::Rng,
) -> (ParamId, ParamId) {
    (
        store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng),
        store.add_zeros(format!("{name}.bias"), fan_out),
    )
}

impl<T: Real> TeranParams<T> {
    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::Config("vocab_size is unresolved".into()));
        }
        let c = config;
        let mut rng = stream(seed, Stream::Init);
        let mut s = ParamStore::new();
        let geometry_hidden = linear_params(&mut s, "visual.geometry.hidden", 7, c.geometry_dim, &mut rng);
        let geometry_out = linear_params(&mut s, "visual.geometry.out", c.geometry_dim, c.feature_dim, &mut rng);
        let visual_in = linear_params(&mut s, "visual.input", c.feature_dim, c.model_dim, &mut rng);
        let visual_stack = EncoderStack::new(&mut s, "visual.reasoning", c.visual_layers, c.model_dim, c.ffn_dim, c.heads, &mut rng)?;
        let visual_proj = linear_params(&mut s, "visual.projection", c.model_dim, c.common_dim, &mut rng);
        let embedding = s.add_normal("text.embedding", c.vocab_size, c.text_dim, &mut rng);
        let text_stack = EncoderStack::new(&mut s, "text.reasoning", c.text_layers, c.text_dim, c.ffn_dim, c.heads, &mut rng)?;
        let text_proj = linear_params(&mut s, "text.projection", c.text_dim, c.common_dim, &mut rng);
        let final_visual = EncoderStack::new(
            &mut s,
            if c.share_final { "final.shared" } else { "final.visual" },
            c.final_layers,
            c.common_dim,
            c.ffn_dim,
            c.heads,
            &mut rng,
        )?;
        let final_text = if c.share_final {
            final_visual.clone()
        } else {
            EncoderStack::new(&mut s, "final.text", c.final_layers, c.common_dim, c.ffn_dim, c.heads, &mut rng)?
        };
        Ok(Self {
            config: c.clone(),
            store: s,
            layout: Layout {
                geometry_hidden,
                geometry_out,
                visual_in,
                visual_stack,
                visual_proj,
                embedding,
                text_stack,
                text_proj,
                final_visual,
                final_text,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Distinct scalar parameters; a shared final stack counts once.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    pub fn final_stack_size(&self) -> usize {
        self.layout.final_visual.param_count()
    }

    pub fn final_stacks_shared(&self) -> bool {
        self.layout.final_visual == self.layout.final_text
    }

    pub fn cast<U: Real>(&self) -> TeranParams<U> {
        TeranParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_regions(&self, r: &RegionSet<T>) -> Result<()> {
        if r.is_empty() || r.mask.count_real() == 0 {
            return Err(Error::Usage("region set has no regions".into()));
        }
        if r.features.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "encode_regions",
                r.features.shape(),
                &[r.len(), self.config.feature_dim],
            ));
        }
        Ok(())
    }

    /// Visual pipeline on an existing tape. Returns `[n × common_dim]`.
    pub fn encode_regions_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        r: &RegionSet<T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        self.check_regions(r)?;
        let l = &self.layout;
        let feats = tape.constant(r.features.clone());
        let geom = tape.constant(r.geometry());
        let g = linear(tape, bound, geom, l.geometry_hidden)?;
        let g = tape.relu(g);
        let g = linear(tape, bound, g, l.geometry_out)?;
        let x = tape.add(feats, g)?;
        let x = linear(tape, bound, x, l.visual_in)?;
        let x = l.visual_stack.forward(tape, bound, x, &r.mask, ctx)?;
        let x = linear(tape, bound, x, l.visual_proj)?;
        let x = l.final_visual.forward(tape, bound, x, &r.mask, ctx)?;
        tape.mask_rows(x, r.mask.as_slice())
    }

    /// Textual pipeline on an existing tape. Returns `[m × common_dim]`.
    pub fn encode_words_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        c: &TokenSeq,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        if c.is_empty() {
            return Err(Error::Usage("caption has no tokens".into()));
        }
        if let Some(&id) = c.token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                size: self.config.vocab_size,
            });
        }
        let emb = tape.gather_rows(bound.var(self.layout.embedding), &c.token_ids)?;
        self.encode_word_vectors_on(tape, bound, emb, &c.mask, ctx)
    }

    /// Textual pipeline from precomputed `[m × text_dim]` word vectors,
    /// bypassing the embedding table.
    pub fn encode_word_vectors_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        words: Var,
        mask: &PadMask,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(words).to_vec();
        if shape.len() != 2 || shape[1] != self.config.text_dim || shape[0] != mask.len() || shape[0] == 0 {
            return Err(Error::shape("encode_words", &shape, &[mask.len(), self.config.text_dim]));
        }
        let l = &self.layout;
        let pe = positional_encoding(shape[0], self.config.text_dim)?;
        let x = tape.add_const(words, pe)?;
        let x = l.text_stack.forward(tape, bound, x, mask, ctx)?;
        let x = linear(tape, bound, x, l.text_proj)?;
        let x = l.final_text.forward(tape, bound, x, mask, ctx)?;
        tape.mask_rows(x, mask.as_slice())
    }

    /// Inference-mode visual encoding on a private tape.
    pub fn encode_regions(&self, r: &RegionSet<T>) -> Result<ContextualizedSet<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let v = self.encode_regions_on(&mut tape, &bound, r, &mut ForwardCtx::eval())?;
        ContextualizedSet::new(tape.value(v).clone(), r.mask.clone())
    }

    /// Inference-mode textual encoding; the output mask is `c.pool_mask`.
    pub fn encode_words(&self, c: &TokenSeq) -> Result<ContextualizedSet<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let v = self.encode_words_on(&mut tape, &bound, c, &mut ForwardCtx::eval())?;
        ContextualizedSet::new(tape.value(v).clone(), c.pool_mask.clone())
    }

    /// Encodes many region sets on one shared binding.
    pub fn encode_regions_batch(&self, sets: &[RegionSet<T>]) -> Result<Vec<ContextualizedSet<T>>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        sets.iter()
            .map(|r| {
                let v = self.encode_regions_on(&mut tape, &bound, r, &mut ForwardCtx::eval())?;
                ContextualizedSet::new(tape.value(v).clone(), r.mask.clone())
            })
            .collect()
    }

    pub fn encode_words_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<ContextualizedSet<T>>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        seqs.iter()
            .map(|c| {
                let v = self.encode_words_on(&mut tape, &bound, c, &mut ForwardCtx::eval())?;
                ContextualizedSet::new(tape.value(v).clone(), c.pool_mask.clone())
            })
            .collect()
    }
}

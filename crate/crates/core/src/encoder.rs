//! Post-norm transformer encoder layer with padding-aware multi-head
//! self-attention.

use crate::error::{Error, Result};
use crate::model::params::{Bound, ParamId, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Additive bias applied to the scores of padded keys.
pub const MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-position validity: `true` is a real element, `false` is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadMask(Vec<bool>);

impl PadMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if !keep.is_empty() && !keep.iter().any(|&k| k) {
            return Err(Error::Usage("mask has no real positions".into()));
        }
        Ok(Self(keep))
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    /// `real` leading positions followed by padding up to `len`.
    pub fn prefix(real: usize, len: usize) -> Self {
        Self((0..len).map(|i| i < real).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_real(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count_real(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn padded_to(&self, len: usize) -> Self {
        let mut v = self.0.clone();
        v.resize(len.max(v.len()), false);
        Self(v)
    }

    /// Clears positions where `drop[i]` is true.
    pub fn without(&self, drop: &[bool]) -> Self {
        Self(self.0.iter().zip(drop).map(|(&k, &d)| k && !d).collect())
    }
}

/// Parameter handles of one encoder layer. Q/K/V projections are stored as
/// single `model_dim × model_dim` matrices whose column chunks are the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub query: (ParamId, ParamId),
    pub key: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
    pub norm_attn: (ParamId, ParamId),
    pub norm_ffn: (ParamId, ParamId),
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
}

fn linear_params<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> (ParamId, ParamId) {
    (
        store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng),
        store.add_zeros(format!("{name}.bias"), fan_out),
    )
}

impl EncoderLayerParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        model_dim: usize,
        ffn_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Parameter(format!(
                "model_dim {model_dim} not divisible by head count {heads}"
            )));
        }
        let d = model_dim;
        Ok(Self {
            query: linear_params(store, &format!("{prefix}.attn.query"), d, d, rng),
            key: linear_params(store, &format!("{prefix}.attn.key"), d, d, rng),
            value: linear_params(store, &format!("{prefix}.attn.value"), d, d, rng),
            output: linear_params(store, &format!("{prefix}.attn.output"), d, d, rng),
            ffn_in: linear_params(store, &format!("{prefix}.ffn.in"), d, ffn_dim, rng),
            ffn_out: linear_params(store, &format!("{prefix}.ffn.out"), ffn_dim, d, rng),
            norm_attn: (
                store.add_ones(format!("{prefix}.norm_attn.gain"), d),
                store.add_zeros(format!("{prefix}.norm_attn.bias"), d),
            ),
            norm_ffn: (
                store.add_ones(format!("{prefix}.norm_ffn.gain"), d),
                store.add_zeros(format!("{prefix}.norm_ffn.bias"), d),
            ),
            heads,
            model_dim,
            ffn_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        let (d, f) = (self.model_dim, self.ffn_dim);
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    }
}

/// Stochastic state for one forward pass.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub dropout: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'a mut Rng) -> Self {
        Self {
            training: true,
            dropout,
            rng: Some(rng),
        }
    }

    pub(crate) fn dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => tape.dropout(x, self.dropout, *rng, true),
            _ => Ok(x),
        }
    }
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let y = tape.matmul(x, bound.var(p.0))?;
    tape.add_row(y, bound.var(p.1))
}

/// Output of [`scaled_dot_attention`].
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(QKᵀ/√d_k + bias)·V` where padded keys get [`MASK_BIAS`].
pub fn scaled_dot_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &PadMask,
) -> Result<Attention> {
    let dk = tape.shape(q)[1];
    if tape.shape(k)[1] != dk {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let n = tape.shape(k)[0];
    if mask.len() != n || tape.shape(v)[0] != n {
        return Err(Error::shape("attention", tape.shape(k), &[mask.len()]));
    }
    if mask.count_real() == 0 {
        return Err(Error::Usage("attention over an all-padding key set".into()));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::lit(1.0 / (dk as f64).sqrt()));
    let logits = if mask.count_real() < n {
        let bias: Vec<T> = mask
            .as_slice()
            .iter()
            .map(|&k| if k { T::zero() } else { T::lit(MASK_BIAS) })
            .collect();
        let b = tape.constant(Tensor::vector(bias));
        tape.add_row(scaled, b)?
    } else {
        scaled
    };
    let weights = tape.softmax(logits, 1)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &EncoderLayerParams,
    x: Var,
    mask: &PadMask,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != p.model_dim {
        return Err(Error::shape("multi_head_attention", &shape, &[shape[0], p.model_dim]));
    }
    let q = linear(tape, bound, x, p.query)?;
    let k = linear(tape, bound, x, p.key)?;
    let v = linear(tape, bound, x, p.value)?;
    let dk = p.model_dim / p.heads;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        heads.push(scaled_dot_attention(tape, qh, kh, vh, mask)?.output);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    linear(tape, bound, joined, p.output)
}

/// `y = LN(x + MHA(x))`, `out = LN(y + FFN(y))`, padded rows zeroed.
pub fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &EncoderLayerParams,
    x: Var,
    mask: &PadMask,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let eps = T::lit(LAYER_NORM_EPS);
    let attn = multi_head_attention(tape, bound, p, x, mask)?;
    let attn = ctx.dropout(tape, attn)?;
    let res = tape.add(x, attn)?;
    let y = tape.layer_norm(res, bound.var(p.norm_attn.0), bound.var(p.norm_attn.1), eps)?;
    let hidden = linear(tape, bound, y, p.ffn_in)?;
    let hidden = tape.relu(hidden);
    let ff = linear(tape, bound, hidden, p.ffn_out)?;
    let ff = ctx.dropout(tape, ff)?;
    let res = tape.add(y, ff)?;
    let out = tape.layer_norm(res, bound.var(p.norm_ffn.0), bound.var(p.norm_ffn.1), eps)?;
    tape.mask_rows(out, mask.as_slice())
}

/// A stack of encoder layers applied in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        depth: usize,
        model_dim: usize,
        ffn_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayerParams::new(store, &format!("{prefix}.{i}"), model_dim, ffn_dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mut x: Var,
        mask: &PadMask,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = encoder_layer(tape, bound, layer, x, mask, ctx)?;
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(EncoderLayerParams::param_count).sum()
    }
}

/// Sinusoidal table: `PE[pos,2i] = sin(pos/10000^{2i/d})`,
/// `PE[pos,2i+1] = cos(pos/10000^{2i/d})`.
pub fn positional_encoding<T: Real>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(Error::Parameter(format!("positional encoding needs an even dim, got {dim}")));
    }
    let mut data = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = T::lit(angle.sin());
            data[pos * dim + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    Tensor::new(vec![len, dim], data)
}

//! Hinge triplet ranking loss over in-batch hardest negatives, and the Adam
//! optimizer that minimizes it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::numerics::{argmax, Real, Tape, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// How per-positive hinge terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Hardest in-batch negatives for each positive `(k, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    /// `l'` per row: hardest caption for image `k`.
    pub caption: Vec<usize>,
    /// `k'` per column: hardest image for caption `k`.
    pub image: Vec<usize>,
}

fn check_square<T: Real>(s: &Tensor<T>) -> Result<usize> {
    match s.shape() {
        [r, c] if r == c => {
            if *r < 2 {
                Err(Error::Usage(format!("triplet loss needs a batch of at least 2, got {r}")))
            } else {
                Ok(*r)
            }
        }
        other => Err(Error::shape("batch_similarities", other, &[other[0], other[0]])),
    }
}

/// `l'_k = argmax_{d≠k} S[k][d]`, `k'_k = argmax_{j≠k} S[j][k]`; ties go to
/// the lowest index.
pub fn hard_negatives<T: Real>(s: &Tensor<T>) -> Result<HardNegatives> {
    let b = check_square(s)?;
    let mut caption = Vec::with_capacity(b);
    let mut image = Vec::with_capacity(b);
    for k in 0..b {
        let l = argmax((0..b).filter(|&d| d != k).map(|d| (d, s.at(k, d)))).expect("b >= 2");
        let j = argmax((0..b).filter(|&j| j != k).map(|j| (j, s.at(j, k)))).expect("b >= 2");
        caption.push(l.0);
        image.push(j.0);
    }
    Ok(HardNegatives { caption, image })
}

fn hinge_routes<T: Real>(s: &Tensor<T>, margin: T, reduction: Reduction) -> Result<Vec<(usize, usize, T)>> {
    let b = check_square(s)?;
    let hn = hard_negatives(s)?;
    let w = match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::lit(b as f64),
    };
    // Each active hinge contributes w·(S_neg − S_pos); the constant margin
    // part is added separately.
    let mut routes = Vec::new();
    for k in 0..b {
        let pos = k * b + k;
        let row_neg = k * b + hn.caption[k];
        let col_neg = hn.image[k] * b + k;
        for neg in [row_neg, col_neg] {
            if margin + s.data()[neg] - s.data()[pos] > T::zero() {
                routes.push((neg, 0, w));
                routes.push((pos, 0, -w));
            }
        }
    }
    Ok(routes)
}

/// `Σ_k [α + S_{k,l'} − S_{k,k}]₊ + [α + S_{k',k} − S_{k,k}]₊`.
pub fn triplet_loss<T: Real>(s: &Tensor<T>, margin: T, reduction: Reduction) -> Result<T> {
    if margin <= T::zero() {
        return Err(Error::Parameter("margin must be positive".into()));
    }
    let b = check_square(s)?;
    let hn = hard_negatives(s)?;
    let mut total = T::zero();
    for k in 0..b {
        let pos = s.at(k, k);
        total = total + (margin + s.at(k, hn.caption[k]) - pos).max(T::zero());
        total = total + (margin + s.at(hn.image[k], k) - pos).max(T::zero());
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / T::lit(b as f64),
    })
}

/// Differentiable [`triplet_loss`] on a `[B × B]` similarity node.
pub fn triplet_loss_on<T: Real>(tape: &mut Tape<T>, s: Var, margin: T, reduction: Reduction) -> Result<Var> {
    if margin <= T::zero() {
        return Err(Error::Parameter("margin must be positive".into()));
    }
    let values = tape.value(s).clone();
    let routes = hinge_routes(&values, margin, reduction)?;
    let b = values.rows();
    let w = match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::lit(b as f64),
    };
    let active = routes.len() / 2;
    let diff = tape.sparse_linear(s, vec![], routes)?;
    let constant = margin * w * T::lit(active as f64);
    tape.add_const(diff, Tensor::scalar(constant))
}

/// Step-wise learning-rate schedule: `lr` until `decay_epoch`, then
/// `lr_decayed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr: f64,
    pub lr_decayed: f64,
    pub decay_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            lr_decayed: 1e-6,
            decay_epoch: 20,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr_decayed
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update using each tensor's accumulated gradient.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Parameter(format!("learning rate {lr} must be positive")));
    }
    if state.first.len() != store.len() {
        return Err(Error::Usage("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = T::lit(lr);
    let eps = T::lit(cfg.eps);
    for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let grad = tensor
            .grad()
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
        if grad.len() != state.first[k].len() {
            return Err(Error::shape("adam_step", tensor.shape(), &[state.first[k].len()]));
        }
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

//! Dense tensors, a reverse-mode tape and the finite-difference checker.

pub mod gradcheck;
pub mod rng;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};

use num_traits::{Float, NumCast};

pub use tape::{Fault, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::cosine_raw;

/// Floating-point element type: `f32` for training, `f64` for checks.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Cosine guard against zero vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Plain cosine similarity `uᵀv / (max(‖u‖,eps)·max(‖v‖,eps))`.
pub fn cosine<T: Real>(u: &[T], v: &[T], eps: T) -> crate::Result<T> {
    if u.len() != v.len() || u.is_empty() {
        return Err(crate::Error::shape("cosine", &[u.len()], &[v.len()]));
    }
    Ok(cosine_raw(u, v, eps))
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Real>(xs: impl IntoIterator<Item = (usize, T)>) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in xs {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "XTRN" | u32 version | u64 config hash | u32 epochs done | u64 steps done
//! f64 best validation score
//! u32 flags (bit 0: optimizer state present) | u32 tensor count
//! per tensor: string name | u32 ndim | u32 dims.. | f32 values
//! if optimizer: u64 adam step | per tensor: f32 first moments | f32 second moments
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TeranParams};
use crate::numerics::{Real, Tensor};
use crate::objective::AdamState;

pub const MAGIC: &[u8; 4] = b"XTRN";
pub const VERSION: u32 = 1;

/// Where a run stood when the checkpoint was written.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub epochs_done: u32,
    pub steps_done: u64,
    /// Best validation score so far, `-inf` before the first validation.
    pub best_score: f64,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            epochs_done: 0,
            steps_done: 0,
            best_score: f64::NEG_INFINITY,
        }
    }
}

pub struct Checkpoint<T> {
    pub params: TeranParams<T>,
    pub progress: Progress,
    pub optimizer: Option<AdamState<T>>,
}

fn f32_of<T: Real>(x: &T) -> f32 {
    x.to_f32().expect("finite")
}

pub fn save<T: Real>(
    path: &Path,
    params: &TeranParams<T>,
    progress: Progress,
    optimizer: Option<&AdamState<T>>,
) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(params.config().hash());
    w.u32(progress.epochs_done);
    w.u64(progress.steps_done);
    w.u64(progress.best_score.to_bits());
    w.u32(u32::from(optimizer.is_some()));
    let store = params.store();
    w.u32(store.len() as u32);
    for (name, t) in store.names().iter().zip(store.tensors()) {
        w.string(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f32s(t.data().iter().map(f32_of));
    }
    if let Some(opt) = optimizer {
        w.u64(opt.step);
        for (m, v) in opt.first.iter().zip(&opt.second) {
            w.f32s(m.iter().map(f32_of));
            w.f32s(v.iter().map(f32_of));
        }
    }
    w.save(path)
}

/// Loads a checkpoint written for `config`; the stored hash must match.
pub fn load<T: Real>(path: &Path, config: &ModelConfig) -> Result<Checkpoint<T>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    if r.bytes(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let hash = r.u64()?;
    if hash != config.hash() {
        return Err(Error::Config(format!(
            "{}: checkpoint (config hash {hash:016x} at byte {at}) was written for a different model config ({:016x})",
            path.display(),
            config.hash()
        )));
    }
    let epochs_done = r.u32()?;
    let steps_done = r.u64()?;
    let best_score = f64::from_bits(r.u64()?);
    let flags = r.u32()?;
    let mut params = TeranParams::<T>::init(config, 0)?;
    let count_at = r.offset();
    let count = r.u32()? as usize;
    if count != params.store().len() {
        return Err(r.error_at(count_at, format!("{count} tensors, config expects {}", params.store().len())));
    }
    let mut values = Vec::with_capacity(count);
    for (expected_name, expected) in params.store().names().iter().zip(params.store().tensors()) {
        let at = r.offset();
        let name = r.string()?;
        if &name != expected_name {
            return Err(r.error_at(at, format!("tensor {name:?}, expected {expected_name:?}")));
        }
        let ndim = r.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if shape != expected.shape() {
            return Err(r.error_at(at, format!("{name}: shape {shape:?}, expected {:?}", expected.shape())));
        }
        let data = r.f32s(expected.numel())?;
        values.push(Tensor::new(shape, data.into_iter().map(|x| T::lit(f64::from(x))).collect())?);
    }
    params.store_mut().load_values(values)?;
    let optimizer = if flags & 1 == 1 {
        let step = r.u64()?;
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for t in params.store().tensors() {
            let conv = |v: Vec<f32>| v.into_iter().map(|x| T::lit(f64::from(x))).collect::<Vec<T>>();
            first.push(conv(r.f32s(t.numel())?));
            second.push(conv(r.f32s(t.numel())?));
        }
        Some(AdamState { step, first, second })
    } else {
        None
    };
    r.expect_end()?;
    Ok(Checkpoint {
        params,
        progress: Progress {
            epochs_done,
            steps_done,
            best_score,
        },
        optimizer,
    })
}

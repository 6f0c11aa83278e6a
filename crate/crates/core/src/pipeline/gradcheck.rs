//! Finite-difference verification of every layer and of the full training
//! loss, at 64-bit on a check-scale copy of the configured architecture.

use std::time::Instant;

use rand::Rng as _;

use crate::alignment::{batch_similarity_on, PoolingKind};
use crate::config::RunConfig;
use crate::encoder::{scaled_dot_attention, ForwardCtx, PadMask, LAYER_NORM_EPS};
use crate::error::Result;
use crate::model::params::Bound;
use crate::model::{ModelConfig, RegionSet, TeranParams, TokenSeq};
use crate::numerics::gradcheck::{check, CheckOptions, CheckReport};
use crate::numerics::rng::{stream, Rng, Stream};
use crate::numerics::{Fault, Tape, Tensor, Var, COSINE_EPS};
use crate::objective::triplet_loss_on;

const COORDS_PER_TENSOR: usize = 6;

#[derive(Clone, Debug)]
pub struct GradcheckSummary {
    pub reports: Vec<CheckReport>,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }

    /// Fixed-width pass/fail table, one row per check.
    pub fn table(&self) -> String {
        let mut s = format!("{:<36} {:>14} {:>7}  result\n", "check", "max_rel_error", "coords");
        for r in &self.reports {
            s.push_str(&format!(
                "{:<36} {:>14.3e} {:>7}  {}\n",
                r.name,
                r.max_rel_error,
                r.coords,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Layer counts, sharing and dropout of `m` at widths small enough for
/// finite differences.
fn check_scale(m: &ModelConfig) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        model_dim: 8,
        text_dim: 8,
        common_dim: 8,
        ffn_dim: 12,
        heads: 2,
        geometry_dim: 5,
        max_regions: 4,
        vocab_size: 9,
        ..m.clone()
    }
}

fn random(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

struct CheckBatch {
    regions: Vec<RegionSet<f64>>,
    captions: Vec<TokenSeq>,
}

/// Two images with one padded region each, two captions of different
/// lengths.
fn toy_batch(m: &ModelConfig, rng: &mut Rng) -> CheckBatch {
    let regions = (0..2)
        .map(|_| {
            let boxes = (0..3)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..0.5f32), rng.gen_range(0.0..0.5f32));
                    [x, y, x + rng.gen_range(0.1..0.5f32), y + rng.gen_range(0.1..0.5f32)]
                })
                .collect();
            RegionSet::new(random(rng, vec![3, m.feature_dim]), boxes, PadMask::all(3))
                .expect("valid")
                .padded_to(4)
        })
        .collect();
    let captions = [vec![1, 4, 2, 7], vec![3, 8, 5]]
        .into_iter()
        .map(|ids| {
            let n = ids.len();
            TokenSeq::new(ids, vec![false; n]).expect("valid").padded_to(4, 0)
        })
        .collect();
    CheckBatch { regions, captions }
}

fn composite(
    tape: &mut Tape<f64>,
    params: &TeranParams<f64>,
    bound: &Bound,
    batch: &CheckBatch,
    cfg: &RunConfig,
) -> Result<Var> {
    // A fresh stream per evaluation keeps the dropout mask fixed.
    let mut rng = stream(cfg.seed, Stream::Check);
    let mut ctx = ForwardCtx::train(params.config().dropout, &mut rng);
    let mut img = Vec::new();
    for r in &batch.regions {
        img.push((params.encode_regions_on(tape, bound, r, &mut ctx)?, &r.mask));
    }
    let mut cap = Vec::new();
    for c in &batch.captions {
        cap.push((params.encode_words_on(tape, bound, c, &mut ctx)?, &c.pool_mask));
    }
    let s = batch_similarity_on(tape, &img, &cap, cfg.training.pooling)?;
    triplet_loss_on(tape, s, cfg.training.margin, cfg.training.reduction)
}

/// Parameter group of a tensor name: the encoder layer it belongs to, or the
/// name without its `weight`/`bias` suffix.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let end = parts
        .iter()
        .position(|p| matches!(*p, "attn" | "ffn" | "norm_attn" | "norm_ffn" | "weight" | "bias"))
        .unwrap_or(parts.len());
    parts[..end].join(".")
}

fn model_checks(cfg: &RunConfig, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    let m = check_scale(&cfg.model);
    let params = TeranParams::<f64>::init(&m, cfg.seed)?;
    let batch = toy_batch(&m, &mut stream(cfg.seed ^ 0x5eed, Stream::Check));
    let store = params.store();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, name) in store.names().iter().enumerate() {
        let g = group_of(name);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((g, vec![i])),
        }
    }
    groups.push(("composite.all_parameters".into(), (0..store.len()).collect()));

    let mut reports = Vec::with_capacity(groups.len());
    for (name, idx) in groups {
        let inputs: Vec<Tensor<f64>> = idx.iter().map(|&i| store.tensors()[i].clone()).collect();
        let f = |t: &mut Tape<f64>, vars: &[Var]| {
            let mut all = Vec::with_capacity(store.len());
            let mut next = vars.iter();
            for (i, tensor) in store.tensors().iter().enumerate() {
                all.push(if idx.contains(&i) {
                    *next.next().expect("one var per input")
                } else {
                    t.constant(tensor.clone())
                });
            }
            composite(t, &params, &Bound::from_vars(all), &batch, cfg)
        };
        reports.push(check(&format!("loss <- {name}"), &inputs, f, opts)?);
    }
    Ok(reports)
}

fn op_checks(cfg: &RunConfig, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    let mut rng = stream(cfg.seed ^ 0x0b5, Stream::Check);
    let mut out = Vec::new();
    let w = |rng: &mut Rng, n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();

    let (a, b, wm) = (random(&mut rng, vec![3, 4]), random(&mut rng, vec![4, 2]), w(&mut rng, 6));
    out.push(check(
        "op.matmul",
        &[a, b],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.weighted_sum(y, wm.clone())
        },
        opts,
    )?);

    let (x, ws) = (random(&mut rng, vec![3, 5]), w(&mut rng, 15));
    for axis in [0, 1] {
        out.push(check(
            &format!("op.softmax.axis{axis}"),
            std::slice::from_ref(&x),
            |t, v| {
                let y = t.softmax(v[0], axis)?;
                t.weighted_sum(y, ws.clone())
            },
            opts,
        )?);
    }

    let (x, g, b, wl) = (
        random(&mut rng, vec![3, 6]),
        random(&mut rng, vec![6]),
        random(&mut rng, vec![6]),
        w(&mut rng, 18),
    );
    out.push(check(
        "op.layer_norm",
        &[x, g, b],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            t.weighted_sum(y, wl.clone())
        },
        opts,
    )?);

    let (u, v2) = (random(&mut rng, vec![5]), random(&mut rng, vec![5]));
    out.push(check("op.cosine", &[u, v2], |t, v| t.cosine(v[0], v[1], COSINE_EPS), opts)?);

    let (q, k, val, wa) = (
        random(&mut rng, vec![3, 4]),
        random(&mut rng, vec![4, 4]),
        random(&mut rng, vec![4, 2]),
        w(&mut rng, 6),
    );
    let mask = PadMask::prefix(3, 4);
    out.push(check(
        "op.attention.masked",
        &[q, k, val],
        |t, v| {
            let att = scaled_dot_attention(t, v[0], v[1], v[2], &mask)?;
            t.weighted_sum(att.output, wa.clone())
        },
        opts,
    )?);

    let sets: Vec<Tensor<f64>> = [3, 2, 4, 3].iter().map(|&n| random(&mut rng, vec![n, 5])).collect();
    let masks = [PadMask::prefix(2, 3), PadMask::all(2), PadMask::prefix(3, 4), PadMask::all(3)];
    let wp = w(&mut rng, 4);
    for kind in PoolingKind::ALL {
        out.push(check(
            &format!("op.alignment_pooling.{}", kind.name()),
            &sets,
            |t, v| {
                let s = batch_similarity_on(t, &[(v[0], &masks[0]), (v[1], &masks[1])], &[(v[2], &masks[2]), (v[3], &masks[3])], kind)?;
                t.weighted_sum(s, wp.clone())
            },
            opts,
        )?);
    }

    let s = random(&mut rng, vec![4, 4]);
    out.push(check(
        "op.triplet_loss",
        &[s],
        |t, v| triplet_loss_on(t, v[0], cfg.training.margin, cfg.training.reduction),
        opts,
    )?);
    Ok(out)
}

/// Runs every check; `fault` corrupts one adjoint kind as a negative control.
pub fn gradcheck(cfg: &RunConfig, fault: Option<Fault>) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let opts = CheckOptions {
        max_coords: Some(COORDS_PER_TENSOR),
        seed: cfg.seed,
        fault,
        ..CheckOptions::default()
    };
    let mut reports = op_checks(cfg, &opts)?;
    reports.extend(model_checks(cfg, &opts)?);
    Ok(GradcheckSummary {
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

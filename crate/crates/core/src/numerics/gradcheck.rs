//! Central finite-difference verification of tape adjoints.

use rand::seq::index::sample;

use crate::error::Result;
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{Fault, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on perturbed coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    /// Gradients smaller than this are compared in absolute terms.
    pub scale_floor: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            scale_floor: 1e-5,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives one leaf per entry of `inputs` and must return a scalar.
/// Error per input is `max|analytic − numeric| / max(max|analytic|,
/// max|numeric|, scale_floor)`; the report keeps the worst input.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_fault(opts.fault);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.leaf(p)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = stream(opts.seed, Stream::Check);
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[k], n);
        let picks: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut p = sample(&mut rng, n, m).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut scale = opts.scale_floor;
        for &i in &picks {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_diff = max_diff.max((analytic[i] - numeric).abs());
            scale = scale.max(analytic[i].abs()).max(numeric.abs());
        }
        coords += picks.len();
        worst = worst.max(max_diff / scale);
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        coords,
        passed: worst < opts.tolerance && worst.is_finite(),
    })
}

//! Central finite-difference verification of recorded gradients.
//!
//! Used by the test suites and by the CLI `selfcheck` command. Checks run in
//! `f64`; the relative error denominator is floored at 1e-6.

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Half-width of the central difference.
    pub step: f64,
    /// Cap on checked coordinates per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(DENOM_FLOOR)
}

/// Compare the recorded gradient of `build`'s scalar output against central
/// finite differences, for every (sampled) coordinate of every input.
///
/// `build` must be a pure function of its inputs; it is re-evaluated twice
/// per checked coordinate.
pub fn check_gradients<F>(
    inputs: &[(Shape, Vec<f64>)],
    build: F,
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let vars: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::var(*shape, data.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&vars)?;
    if loss.numel() != 1 {
        return Err(Error::InvalidArgument(
            "gradcheck build function must return a scalar".into(),
        ));
    }
    let grads = loss.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for (i, (shape, data)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[i]);
        let mut coords: Vec<usize> = (0..data.len()).collect();
        if let Some(cap) = opts.max_coords_per_input {
            if coords.len() > cap {
                coords.shuffle(&mut rng);
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        for &coord in &coords {
            let fd = {
                let eval = |v: f64| -> Result<f64> {
                    let mut perturbed = data.clone();
                    perturbed[coord] = v;
                    let mut vs = vars.clone();
                    vs[i] = Tensor::var(*shape, perturbed)?;
                    build(&vs)?.item()
                };
                let plus = eval(data[coord] + opts.step)?;
                let minus = eval(data[coord] - opts.step)?;
                (plus - minus) / (2.0 * opts.step)
            };
            max_rel = max_rel.max(rel_err(analytic[coord], fd));
            checked += 1;
        }
    }

    Ok(CheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

/// Uniform draw in `[-1, 1]`, the standard gradcheck input regime.
pub fn uniform_input(shape: Shape, rng: &mut impl rand::Rng) -> (Shape, Vec<f64>) {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (shape, data)
}

/// Uniform draw with magnitude bounded away from zero, for kinked ops
/// (relu, abs, clamp) where finite differences must not straddle the kink.
pub fn uniform_input_away_from_zero(
    shape: Shape,
    min_abs: f64,
    rng: &mut impl rand::Rng,
) -> (Shape, Vec<f64>) {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = rng.gen_range(min_abs..1.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * mag
        })
        .collect();
    (shape, data)
}

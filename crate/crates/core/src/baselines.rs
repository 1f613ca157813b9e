//! Multinomial and absorbing discrete diffusion.
//!
//! Both processes share the noise schedules of the continuous process: the
//! probability of keeping a token after `t` steps is tied to `alpha_bar(t)`.
//! Neither looks at the codebook geometry. The absorbing mask token is unit
//! id `K`.

use ndarray::ArrayView2;
use rand::Rng as _;

use crate::denoiser::{mask_id, Denoiser};
use crate::error::{invalid, Result};
use crate::hybrid::{run_reverse, SampleOutput, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::seed::{self, Rng};
use crate::system::System;

/// Which discrete corruption a baseline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    Multinomial,
    Absorbing { mask_id: usize },
}

impl CorruptionKind {
    pub fn absorbing(num_units: usize) -> Self {
        CorruptionKind::Absorbing { mask_id: mask_id(num_units) }
    }

    pub fn system(self) -> System {
        match self {
            CorruptionKind::Multinomial => System::Multinomial,
            CorruptionKind::Absorbing { .. } => System::Absorbing,
        }
    }
}

fn check_units(x: &[usize], k: usize) -> Result<()> {
    match x.iter().find(|&&u| u >= k) {
        Some(u) => invalid(format!("unit {u} out of range for K = {k}")),
        None => Ok(()),
    }
}

/// With probability `1 - alpha_bar(t)` each position is resampled uniformly
/// over all `k` units.
pub fn multinomial_q_sample(ns: &NoiseSchedule, x0: &[usize], t: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    multinomial_q_sample_with(ns, x0, t, k, &mut seed::rng(seed))
}

pub(crate) fn multinomial_q_sample_with(
    ns: &NoiseSchedule,
    x0: &[usize],
    t: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ns.check_t(t)?;
    check_units(x0, k)?;
    let keep = ns.alpha_bar(t);
    Ok(x0
        .iter()
        .map(|&u| if rng.gen::<f64>() < keep { u } else { rng.gen_range(0..k) })
        .collect())
}

/// Posterior over `x_{t_prev}` for one position:
/// `∝ [α' δ(x_t) + (1-α')/K] ⊙ [ᾱ_prev p + (1-ᾱ_prev)/K]`, `α' = ᾱ_t / ᾱ_prev`.
pub fn multinomial_posterior(ns: &NoiseSchedule, x_t: usize, probs: &[f64], t: usize, t_prev: usize) -> Vec<f64> {
    let k = probs.len() as f64;
    let ab_prev = ns.alpha_bar(t_prev);
    let step = ns.alpha_bar(t) / ab_prev;
    let mut theta: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let retain = if j == x_t { step } else { 0.0 } + (1.0 - step) / k;
            retain * (ab_prev * p + (1.0 - ab_prev) / k)
        })
        .collect();
    let total: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|v| *v /= total);
    theta
}

fn check_probs(x_t: &[usize], x0_probs: &ArrayView2<'_, f64>) -> Result<()> {
    if x0_probs.nrows() != x_t.len() {
        return invalid("x0_probs must have one row per position");
    }
    for row in x0_probs.outer_iter() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return invalid("x0_probs rows must be distributions");
        }
    }
    check_units(x_t, x0_probs.ncols())
}

/// Samples `x_{t_prev}` given `x_t` and per-position predictions of `x0`.
/// At `t_prev = 0` this is the argmax of `x0_probs`.
pub fn multinomial_reverse_step(
    ns: &NoiseSchedule,
    x_t: &[usize],
    x0_probs: ArrayView2<'_, f64>,
    t: usize,
    t_prev: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    multinomial_reverse_step_with(ns, x_t, x0_probs, t, t_prev, &mut seed::rng(seed))
}

pub(crate) fn multinomial_reverse_step_with(
    ns: &NoiseSchedule,
    x_t: &[usize],
    x0_probs: ArrayView2<'_, f64>,
    t: usize,
    t_prev: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ns.check_pair(t, t_prev)?;
    check_probs(x_t, &x0_probs)?;
    if t_prev == 0 {
        return Ok(x0_probs.outer_iter().map(crate::denoiser::argmax).collect());
    }
    Ok(x_t
        .iter()
        .zip(x0_probs.outer_iter())
        .map(|(&xt, row)| {
            let post = multinomial_posterior(ns, xt, row.as_slice().expect("contiguous"), t, t_prev);
            sample_categorical(&post, rng)
        })
        .collect())
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let mut r = rng.gen::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if r < p {
            return i;
        }
        r -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Each position becomes the mask token `k` with probability `1 - alpha_bar(t)`.
pub fn absorbing_q_sample(ns: &NoiseSchedule, x0: &[usize], t: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    absorbing_q_sample_with(ns, x0, t, k, &mut seed::rng(seed))
}

pub(crate) fn absorbing_q_sample_with(
    ns: &NoiseSchedule,
    x0: &[usize],
    t: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ns.check_t(t)?;
    check_units(x0, k)?;
    let keep = ns.alpha_bar(t);
    Ok(x0.iter().map(|&u| if rng.gen::<f64>() < keep { u } else { k }).collect())
}

/// Reveals each masked position to `x0_hat` with probability
/// `(ᾱ_prev - ᾱ_t) / (1 - ᾱ_t)`; unmasked positions are kept. At
/// `t_prev = 0` every remaining mask is revealed.
pub fn absorbing_reverse_step(
    ns: &NoiseSchedule,
    x_t: &[usize],
    x0_hat: &[usize],
    t: usize,
    t_prev: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    absorbing_reverse_step_with(ns, x_t, x0_hat, t, t_prev, k, &mut seed::rng(seed))
}

pub(crate) fn absorbing_reverse_step_with(
    ns: &NoiseSchedule,
    x_t: &[usize],
    x0_hat: &[usize],
    t: usize,
    t_prev: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ns.check_pair(t, t_prev)?;
    if x_t.len() != x0_hat.len() {
        return invalid("x_t and x0_hat lengths differ");
    }
    check_units(x_t, k + 1)?;
    check_units(x0_hat, k)?;
    let reveal = if t_prev == 0 {
        1.0
    } else {
        let ab_t = ns.alpha_bar(t);
        (ns.alpha_bar(t_prev) - ab_t) / (1.0 - ab_t)
    };
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(&xt, &x0)| {
            if xt != k {
                xt
            } else if t_prev == 0 || rng.gen::<f64>() < reveal {
                x0
            } else {
                k
            }
        })
        .collect())
}

/// Reverse sampling for a discrete baseline, mirroring [`crate::hybrid::sample`].
#[allow(clippy::too_many_arguments)]
pub fn baseline_sample<D: Denoiser>(
    kind: CorruptionKind,
    d: &D,
    ns: &NoiseSchedule,
    source: &[usize],
    target_len: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    if let CorruptionKind::Absorbing { mask_id } = kind {
        if mask_id != d.num_units() || d.vocab_size() <= mask_id {
            return invalid("absorbing sampling needs the mask token K in the denoiser vocabulary");
        }
    }
    let ctx = d.encode(source)?;
    run_reverse(kind.system(), d, &ctx, None, ns, target_len, cfg, seed)
}

//! Finite-difference verification of the training-loss gradients.

use rand::seq::index::sample;
use serde::Serialize;

use super::model::Transformer;
use super::train::training_loss;
use crate::codebook::Codebook;
use crate::error::{invalid, Result};
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::synthbench::SynthPair;
use crate::system::System;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of [`training_loss`] with central differences
/// on `n_random` random parameters plus one random entry of every tensor.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck(
    model: &Transformer,
    system: System,
    cb: &Codebook,
    ns: &NoiseSchedule,
    batch: &[SynthPair],
    eps: f64,
    n_random: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return invalid("eps must be positive");
    }
    let smoothing = 0.2;
    let loss_seed = seed::sub_seed(seed, "gradcheck-loss");
    let (_, grads) = training_loss(model, system, cb, ns, batch, smoothing, loss_seed)?;

    let mut rng = seed::rng_for(seed, "gradcheck-params");
    let n = model.num_params();
    let mut indices: Vec<usize> = sample(&mut rng, n, n_random.min(n)).into_vec();
    for spec in model.layout().specs() {
        let size = spec.rows * spec.cols;
        indices.push(spec.offset + sample(&mut rng, size, 1).index(0));
    }
    indices.sort_unstable();
    indices.dedup();

    let mut probe = model.clone();
    let mut checks = Vec::with_capacity(indices.len());
    for i in indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = training_loss(&probe, system, cb, ns, batch, smoothing, loss_seed)?.0.total;
        probe.params_mut()[i] = orig - eps;
        let minus = training_loss(&probe, system, cb, ns, batch, smoothing, loss_seed)?.0.total;
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        checks.push(ParamCheck {
            index: i,
            tensor: model.layout().owner(i).name.clone(),
            analytic: grads[i],
            numeric,
            rel_error: relative_error(grads[i], numeric),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, checks })
}

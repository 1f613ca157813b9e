//! The hybrid diffusion process: Gaussian corruption of embedded units in
//! the codebook space followed by re-quantization, and the matching reverse
//! sampler that alternates discrete `x0` prediction with continuous
//! posterior steps.

use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::codebook::Codebook;
use crate::denoiser::{argmax_units, mask_id, nn, sequence_nll, top_lengths, Denoiser};
use crate::error::{invalid, Result};
use crate::schedule::{subset_trajectory, NoiseSchedule, ReverseMode};
use crate::seed::{self, Rng};
use crate::synthbench::Metric;
use crate::system::System;

/// Reverse-sampling options shared by every system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of reverse steps (size of the timestep subset).
    pub steps: usize,
    pub mode: ReverseMode,
    pub length_beam: usize,
    pub track_intermediate: bool,
    /// When false the hybrid system skips the codebook entirely and runs
    /// multinomial diffusion instead.
    pub kmeans_mapping: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, mode: ReverseMode::Posterior, length_beam: 5, track_intermediate: false, kmeans_mapping: true }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    fn validate(&self, ns: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > ns.steps() {
            return invalid(format!("steps = {} must lie in [1, {}]", self.steps, ns.steps()));
        }
        if self.length_beam == 0 {
            return invalid("length_beam must be >= 1");
        }
        Ok(())
    }
}

/// One recorded reverse step: the timestep and the argmax prediction of `x0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: usize,
    pub x0_hat: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub units: Vec<usize>,
    /// Logits of the last denoiser call, used for perplexity scoring.
    pub final_logits: Array2<f64>,
    pub trace: Vec<TraceEntry>,
    pub denoiser_calls: usize,
}

impl SampleOutput {
    /// Mean negative log-probability of the output under the final logits.
    pub fn score(&self) -> f64 {
        sequence_nll(&self.units, self.final_logits.view()).unwrap_or(f64::INFINITY)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `x_t = quantize(q_sample(embed(x0), t, noise))` with noise drawn from `seed`.
pub fn forward_corrupt(cb: &Codebook, ns: &NoiseSchedule, x0: &[usize], t: usize, seed: u64) -> Result<Vec<usize>> {
    forward_corrupt_with(cb, ns, x0, t, &mut seed::rng(seed))
}

pub(crate) fn forward_corrupt_with(
    cb: &Codebook,
    ns: &NoiseSchedule,
    x0: &[usize],
    t: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ns.check_t(t)?;
    let v0 = cb.embed(x0)?;
    let noise = gaussian(x0.len(), cb.dim(), rng);
    let vt = ns.q_sample(v0.view(), t, noise.view())?;
    cb.quantize(vt.view())
}

fn unit_probs(logits: &Array2<f64>, num_units: usize) -> Array2<f64> {
    let mut p = logits.slice(s![.., ..num_units]).to_owned();
    nn::softmax_rows(&mut p);
    p
}

/// Shared reverse loop for all three systems. The generator stream depends
/// only on the effective process, so the hybrid system with the K-means
/// mapping disabled reproduces the multinomial baseline exactly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_reverse<D: Denoiser>(
    system: System,
    d: &D,
    ctx: &D::Context,
    cb: Option<&Codebook>,
    ns: &NoiseSchedule,
    target_len: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    cfg.validate(ns)?;
    if target_len == 0 || target_len > d.max_len() {
        return invalid(format!("target_len = {target_len} must lie in [1, {}]", d.max_len()));
    }
    let process = system.effective(cfg.kmeans_mapping);
    let k = d.num_units();
    let mut rng = seed::rng_for(seed, &format!("sampler-{process}"));

    let mut continuous: Option<Array2<f64>> = None;
    let mut x: Vec<usize> = match process {
        System::Hybrid => {
            let cb = match cb {
                Some(cb) => cb,
                None => return invalid("hybrid sampling needs a codebook"),
            };
            if cb.len() != k {
                return invalid(format!("codebook has {} units, denoiser {k}", cb.len()));
            }
            let v = gaussian(target_len, cb.dim(), &mut rng);
            let x = cb.quantize(v.view())?;
            continuous = Some(v);
            x
        }
        System::Multinomial => (0..target_len).map(|_| rand::Rng::gen_range(&mut rng, 0..k)).collect(),
        System::Absorbing => vec![mask_id(k); target_len],
    };

    let trajectory = subset_trajectory(ns.steps(), cfg.steps)?;
    let mut trace = Vec::new();
    let mut calls = 0;
    for (i, &t) in trajectory.iter().enumerate() {
        let t_prev = trajectory.get(i + 1).copied().unwrap_or(0);
        let logits = d.logits(ctx, &x, t)?;
        calls += 1;
        if logits.dim() != (target_len, d.vocab_size()) {
            return invalid("denoiser returned logits of the wrong shape");
        }
        let x0_hat = argmax_units(logits.view(), k);
        if cfg.track_intermediate {
            trace.push(TraceEntry { t, x0_hat: x0_hat.clone() });
        }
        x = match process {
            System::Hybrid => {
                let cb = cb.expect("checked above");
                let v_t = continuous.take().expect("hybrid state");
                let v0_hat = cb.embed(&x0_hat)?;
                let noise = if t_prev == 0 { Array2::zeros(v_t.dim()) } else { gaussian(target_len, cb.dim(), &mut rng) };
                let v = ns.posterior_sample(v_t.view(), v0_hat.view(), t, t_prev, noise.view(), cfg.mode)?;
                let next = cb.quantize(v.view())?;
                continuous = Some(v);
                next
            }
            System::Multinomial => {
                let probs = unit_probs(&logits, k);
                baselines::multinomial_reverse_step_with(ns, &x, probs.view(), t, t_prev, &mut rng)?
            }
            System::Absorbing => baselines::absorbing_reverse_step_with(ns, &x, &x0_hat, t, t_prev, k, &mut rng)?,
        };
        if t_prev == 0 {
            return Ok(SampleOutput { units: x, final_logits: logits, trace, denoiser_calls: calls });
        }
    }
    unreachable!("trajectory ends at t_prev = 0")
}

/// Reverse sampling for the hybrid system at a fixed target length.
#[allow(clippy::too_many_arguments)]
pub fn sample<D: Denoiser>(
    d: &D,
    cb: &Codebook,
    ns: &NoiseSchedule,
    source: &[usize],
    target_len: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let ctx = d.encode(source)?;
    run_reverse(System::Hybrid, d, &ctx, Some(cb), ns, target_len, cfg, seed)
}

/// Result of length-beam decoding.
#[derive(Debug, Clone)]
pub struct BeamDecode {
    pub best: SampleOutput,
    /// `(length, score)` for every candidate, in predictor order.
    pub candidates: Vec<(usize, f64)>,
}

/// Decodes one candidate per predicted length and keeps the one with the
/// lowest mean negative log-probability (ties to the shorter length).
#[allow(clippy::too_many_arguments)]
pub fn decode<D: Denoiser>(
    system: System,
    d: &D,
    cb: Option<&Codebook>,
    ns: &NoiseSchedule,
    source: &[usize],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<BeamDecode> {
    cfg.validate(ns)?;
    let ctx = d.encode(source)?;
    let lengths = top_lengths(d.length_logits(&ctx).view(), cfg.length_beam.min(d.max_len()))?;
    let outputs: Vec<SampleOutput> = lengths
        .par_iter()
        .map(|&len| run_reverse(system, d, &ctx, cb, ns, len, cfg, seed))
        .collect::<Result<_>>()?;
    let candidates: Vec<(usize, f64)> = lengths.iter().zip(&outputs).map(|(&l, o)| (l, o.score())).collect();
    let best = (0..outputs.len())
        .min_by(|&a, &b| candidates[a].1.total_cmp(&candidates[b].1).then(candidates[a].0.cmp(&candidates[b].0)))
        .expect("beam >= 1");
    let best = outputs.into_iter().nth(best).expect("index in range");
    Ok(BeamDecode { best, candidates })
}

/// Hybrid sampling with length-beam selection.
pub fn sample_with_length_beam<D: Denoiser>(
    d: &D,
    cb: &Codebook,
    ns: &NoiseSchedule,
    source: &[usize],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    Ok(decode(System::Hybrid, d, Some(cb), ns, source, cfg, seed)?.best.units)
}

/// Fraction of positions left unchanged by `forward_corrupt`, for each `t`.
pub fn knn_accuracy_curve(
    cb: &Codebook,
    ns: &NoiseSchedule,
    data: &[Vec<usize>],
    ts: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if data.is_empty() || data.iter().all(|x| x.is_empty()) {
        return invalid("knn accuracy needs at least one non-empty sequence");
    }
    if ts.is_empty() {
        return invalid("ts must be non-empty");
    }
    for &t in ts {
        ns.check_t(t)?;
    }
    ts.par_iter()
        .map(|&t| {
            let mut rng = seed::rng_for(seed, &format!("knn-accuracy-{t}"));
            let mut hits = 0usize;
            let mut total = 0usize;
            for x in data {
                let xt = forward_corrupt_with(cb, ns, x, t, &mut rng)?;
                hits += xt.iter().zip(x).filter(|(a, b)| a == b).count();
                total += x.len();
            }
            Ok((t, hits as f64 / total as f64))
        })
        .collect()
}

/// Scores every intermediate `x0` prediction of a trace against the
/// reference: `(step index, t, score)`.
pub fn intermediate_quality(trace: &[TraceEntry], reference: &[usize], metric: &Metric<'_>) -> Result<Vec<(usize, usize, f64)>> {
    if trace.is_empty() {
        return invalid("trace is empty; sample with track_intermediate");
    }
    trace
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((i, e.t, metric.score(&[e.x0_hat.clone()], &[reference.to_vec()])?)))
        .collect()
}

/// Corpus-level version of [`intermediate_quality`]: step `i` of the curve
/// scores the `i`-th prediction of every trace together.
pub fn intermediate_curve(traces: &[Vec<TraceEntry>], references: &[Vec<usize>], metric: &Metric<'_>) -> Result<Vec<(usize, usize, f64)>> {
    if traces.is_empty() || traces.len() != references.len() {
        return invalid("need one trace per reference");
    }
    let steps = traces[0].len();
    if steps == 0 || traces.iter().any(|t| t.len() != steps) {
        return invalid("traces must be non-empty and share a step count");
    }
    (0..steps)
        .map(|i| {
            let hyps: Vec<Vec<usize>> = traces.iter().map(|t| t[i].x0_hat.clone()).collect();
            Ok((i, traces[0][i].t, metric.score(&hyps, references)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::default_codebook;
    use crate::denoiser::OracleDenoiser;

    #[test]
    fn oracle_single_step() {
        let cb = default_codebook(0).unwrap();
        let ns = NoiseSchedule::uniform(100, 0.3).unwrap();
        let src = vec![1, 2, 3];
        let tgt = vec![10, 11, 25, 31, 33];
        let d = OracleDenoiser::new(100, 64, [(&src[..], &tgt[..])]);
        let cfg = SamplerConfig { steps: 1, length_beam: 1, ..Default::default() };
        let out = sample(&d, &cb, &ns, &src, 5, &cfg, 3).unwrap();
        assert_eq!(out.units, tgt);
        assert_eq!(out.denoiser_calls, 1);
        assert!(sample(&d, &cb, &ns, &src, 5, &SamplerConfig::with_steps(101), 3).is_err());
        assert!(sample(&d, &cb, &ns, &src, 0, &cfg, 3).is_err());
    }

    #[test]
    fn corrupt_matches_system_dispatch() {
        let cb = default_codebook(0).unwrap();
        let ns = NoiseSchedule::uniform(100, 0.3).unwrap();
        let x0: Vec<usize> = (0..40).collect();
        let a = forward_corrupt(&cb, &ns, &x0, 60, 8).unwrap();
        let b = crate::system::corrupt(System::Hybrid, &cb, &ns, &x0, 60, &mut seed::rng(8)).unwrap();
        assert_eq!(a, b);
    }
}

//! Training objective and the Adam training loop.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Transformer;
use super::nn::log_softmax;
use super::Denoiser;
use crate::codebook::Codebook;
use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::seed::{self, Rng};
use crate::synthbench::SynthPair;
use crate::system::{corrupt, System};

/// Weight of the length-prediction loss.
pub const LENGTH_LOSS_WEIGHT: f64 = 0.1;

/// Examples per deterministic gradient-accumulation chunk.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 500,
            total_steps: 5000,
            batch_size: 32,
            label_smoothing: 0.2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return invalid("warmup_steps must not exceed total_steps");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return invalid("lr must be >= 0 and label_smoothing in [0, 1)");
        }
        Ok(())
    }

    /// Linear warmup followed by inverse-square-root decay; `step` is 1-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// Loss components; `total = token + LENGTH_LOSS_WEIGHT * length`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean label-smoothed cross-entropy per target position.
    pub token: f64,
    /// Mean length cross-entropy per example.
    pub length: f64,
}

/// Label-smoothed cross-entropy summed over positions, with its gradient
/// w.r.t. the logits. Smoothing mass is spread over the `num_units` real units.
pub fn token_loss(logits: &Array2<f64>, targets: &[usize], num_units: usize, smoothing: f64) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let logp = log_softmax(logits.row(i));
        let mut row = grad.row_mut(i);
        for j in 0..logp.len() {
            let q = if j < num_units { smoothing / num_units as f64 } else { 0.0 } + if j == y { 1.0 - smoothing } else { 0.0 };
            if q > 0.0 {
                total -= q * logp[j];
            }
            row[j] = logp[j].exp() - q;
        }
    }
    (total, grad)
}

/// Cross-entropy of the true length (`len`, 1-based) and its gradient.
pub fn length_loss(length_logits: &Array1<f64>, len: usize) -> (f64, Array1<f64>) {
    let logp = log_softmax(length_logits.view());
    let idx = (len - 1).min(logp.len() - 1);
    let mut grad = logp.mapv(f64::exp);
    grad[idx] -= 1.0;
    (-logp[idx], grad)
}

/// The sampled inputs for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedExample {
    pub t: usize,
    pub x_t: Vec<usize>,
}

fn example_rng(seed: u64, index: usize) -> Rng {
    seed::rng_for(seed, &format!("example-{index}"))
}

/// Draws `t ~ U{1..T}` and `x_t` from the system's forward process.
pub fn corrupt_example(system: System, cb: &Codebook, ns: &NoiseSchedule, target: &[usize], rng: &mut Rng) -> Result<CorruptedExample> {
    let t = rng.gen_range(1..=ns.steps());
    let x_t = corrupt(system, cb, ns, target, t, rng)?;
    Ok(CorruptedExample { t, x_t })
}

/// Loss of any denoiser on a batch (no gradients).
pub fn evaluate_loss<D: Denoiser>(
    d: &D,
    system: System,
    cb: &Codebook,
    ns: &NoiseSchedule,
    batch: &[SynthPair],
    smoothing: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return invalid("batch must be non-empty");
    }
    let mut token = 0.0;
    let mut positions = 0usize;
    let mut length = 0.0;
    for (i, pair) in batch.iter().enumerate() {
        cb.check_units(&pair.target)?;
        let ex = corrupt_example(system, cb, ns, &pair.target, &mut example_rng(seed, i))?;
        let ctx = d.encode(&pair.source)?;
        let logits = d.logits(&ctx, &ex.x_t, ex.t)?;
        token += token_loss(&logits, &pair.target, d.num_units(), smoothing).0;
        positions += pair.target.len();
        length += length_loss(&d.length_logits(&ctx), pair.target.len()).0;
    }
    let token = token / positions as f64;
    let length = length / batch.len() as f64;
    Ok(LossBreakdown { total: token + LENGTH_LOSS_WEIGHT * length, token, length })
}

/// Loss and parameter gradients of the trainable denoiser on a batch.
///
/// Each example draws its own timestep, corruption and dropout from
/// `(seed, example index)`; per-chunk gradients are summed in a fixed order.
pub fn training_loss(
    model: &Transformer,
    system: System,
    cb: &Codebook,
    ns: &NoiseSchedule,
    batch: &[SynthPair],
    smoothing: f64,
    seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return invalid("batch must be non-empty");
    }
    let k = model.num_units();
    if cb.len() != k {
        return invalid(format!("codebook has {} units, denoiser {k}", cb.len()));
    }
    let positions: usize = batch.iter().map(|p| p.target.len()).sum();
    let token_scale = 1.0 / positions as f64;
    let length_scale = LENGTH_LOSS_WEIGHT / batch.len() as f64;

    let indexed: Vec<(usize, &SynthPair)> = batch.iter().enumerate().collect();
    let partials: Vec<(f64, f64, Vec<f64>)> = indexed
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0; model.num_params()];
            let (mut tok, mut len) = (0.0, 0.0);
            for &(i, pair) in chunk {
                cb.check_units(&pair.target)?;
                let mut rng = example_rng(seed, i);
                let ex = corrupt_example(system, cb, ns, &pair.target, &mut rng)?;
                let out = model.forward_tape(&pair.source, &ex.x_t, ex.t, Some(&mut rng))?;
                let (tl, mut dlogits) = token_loss(&out.logits, &pair.target, k, smoothing);
                let (ll, mut dlen) = length_loss(&out.length_logits, pair.target.len());
                dlogits *= token_scale;
                dlen *= length_scale;
                model.backward(&out.tape, &dlogits, &dlen, &mut grads);
                tok += tl;
                len += ll;
            }
            Ok((tok, len, grads))
        })
        .collect::<Result<_>>()?;

    let mut grads = vec![0.0; model.num_params()];
    let (mut tok, mut len) = (0.0, 0.0);
    for (t, l, g) in partials {
        tok += t;
        len += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let token = tok * token_scale;
    let length = len / batch.len() as f64;
    Ok((LossBreakdown { total: token + LENGTH_LOSS_WEIGHT * length, token, length }, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub token_loss: f64,
    pub length_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
}

impl TrainReport {
    /// Writes `step,loss,lr` rows.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "lr"])?;
        for s in &self.history {
            w.write_record([s.step.to_string(), format!("{:.10e}", s.loss), format!("{:.10e}", s.lr)])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Trains `model` in place with Adam; `on_step` sees every step's log.
pub fn train_with(
    model: &mut Transformer,
    dataset: &[SynthPair],
    system: System,
    cb: &Codebook,
    ns: &NoiseSchedule,
    tc: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    tc.validate()?;
    if dataset.is_empty() {
        return invalid("training dataset is empty");
    }
    let mut adam = Adam::new(model.num_params());
    let mut batch_rng = seed::rng_for(tc.seed, "batches");
    let mut report = TrainReport::default();
    for step in 1..=tc.total_steps {
        let batch: Vec<SynthPair> =
            (0..tc.batch_size).map(|_| dataset[batch_rng.gen_range(0..dataset.len())].clone()).collect();
        let step_seed = seed::sub_seed(tc.seed, &format!("step-{step}"));
        let (loss, grads) = training_loss(model, system, cb, ns, &batch, tc.label_smoothing, step_seed)?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: loss.total });
        }
        let lr = tc.lr_at(step);
        adam.step(model.params_mut(), &grads, lr, tc);
        let log = StepLog { step, loss: loss.total, token_loss: loss.token, length_loss: loss.length, lr };
        on_step(&log);
        report.history.push(log);
    }
    Ok(report)
}

pub fn train(
    model: &mut Transformer,
    dataset: &[SynthPair],
    system: System,
    cb: &Codebook,
    ns: &NoiseSchedule,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, dataset, system, cb, ns, tc, |_| {})
}

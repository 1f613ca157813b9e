//! Noise schedules and the Gaussian kernels of the continuous forward process.
//!
//! Timesteps are 1-based: `alpha_bar(t)` for `t in 1..=T`, with `alpha_bar(0)`
//! the signal level before the first step (1 for the linear schedule,
//! `1 - beta0` for the uniform one).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Paper-scale number of diffusion steps.
pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_BETA0: f64 = 0.3;
/// Lower clip for the uniform schedule's signal level.
pub const UNIFORM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Uniform,
}

/// How a reverse step in the continuous space is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReverseMode {
    /// Gaussian posterior `q(v_prev | v_t, v0_hat)`.
    #[default]
    Posterior,
    /// Re-corrupt the prediction: `q(v_prev | v0_hat)`.
    Renoise,
}

/// Serialized schedule description, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta0: f64,
}

impl ScheduleSpec {
    pub fn linear(t: usize) -> Self {
        let scale = DEFAULT_T as f64 / t as f64;
        Self {
            kind: ScheduleKind::Linear,
            t,
            beta_start: DEFAULT_BETA_START * scale,
            beta_end: DEFAULT_BETA_END * scale,
            beta0: DEFAULT_BETA0,
        }
    }

    pub fn uniform(t: usize) -> Self {
        Self { kind: ScheduleKind::Uniform, ..Self::linear(t) }
    }

    pub fn of_kind(kind: ScheduleKind, t: usize) -> Self {
        match kind {
            ScheduleKind::Linear => Self::linear(t),
            ScheduleKind::Uniform => Self::uniform(t),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.t, self.beta_start, self.beta_end),
            ScheduleKind::Uniform => NoiseSchedule::uniform(self.t, self.beta0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    alpha_bar0: f64,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t < 2 {
            return invalid("T must be >= 2");
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { kind: ScheduleKind::Linear, betas, alpha_bars, alpha_bar0: 1.0 })
    }

    /// Signal level decreasing linearly from `1 - beta0`:
    /// `alpha_bar(t) = (1 - beta0)(1 - t/T)`, clipped below at [`UNIFORM_FLOOR`].
    pub fn uniform(t: usize, beta0: f64) -> Result<Self> {
        if t < 2 {
            return invalid("T must be >= 2");
        }
        if !(0.0 < beta0 && beta0 < 1.0) {
            return invalid(format!("need 0 < beta0 < 1, got {beta0}"));
        }
        let start = 1.0 - beta0;
        let alpha_bars: Vec<f64> = (1..=t)
            .map(|s| (start * (1.0 - s as f64 / t as f64)).max(UNIFORM_FLOOR))
            .collect();
        let mut prev = start;
        let betas = alpha_bars
            .iter()
            .map(|&a| {
                let b = 1.0 - a / prev;
                prev = a;
                b
            })
            .collect();
        Ok(Self { kind: ScheduleKind::Uniform, betas, alpha_bars, alpha_bar0: start })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Per-step noise level; `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal level; `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            self.alpha_bar0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    pub(crate) fn check_pair(&self, t: usize, t_prev: usize) -> Result<()> {
        self.check_t(t)?;
        if t_prev >= t {
            return invalid(format!("t_prev = {t_prev} must be < t = {t}"));
        }
        Ok(())
    }

    /// Closed-form corruption `sqrt(ab_t) v0 + sqrt(1 - ab_t) noise`.
    pub fn q_sample(&self, v0: ArrayView2<'_, f64>, t: usize, noise: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_t(t)?;
        if v0.dim() != noise.dim() {
            return invalid(format!("noise shape {:?} differs from v0 shape {:?}", noise.dim(), v0.dim()));
        }
        let ab = self.alpha_bar(t);
        Ok(&v0 * ab.sqrt() + &noise * (1.0 - ab).sqrt())
    }

    /// One reverse step from `t` to `t_prev` given the predicted clean
    /// vectors `v0_hat`. At `t_prev = 0` the posterior mode returns `v0_hat`.
    #[allow(clippy::too_many_arguments)]
    pub fn posterior_sample(
        &self,
        v_t: ArrayView2<'_, f64>,
        v0_hat: ArrayView2<'_, f64>,
        t: usize,
        t_prev: usize,
        noise: ArrayView2<'_, f64>,
        mode: ReverseMode,
    ) -> Result<Array2<f64>> {
        self.check_pair(t, t_prev)?;
        if v_t.dim() != v0_hat.dim() || v_t.dim() != noise.dim() {
            return invalid("v_t, v0_hat and noise must share a shape");
        }
        match mode {
            ReverseMode::Renoise => {
                if t_prev == 0 {
                    return Ok(v0_hat.to_owned());
                }
                self.q_sample(v0_hat, t_prev, noise)
            }
            ReverseMode::Posterior => {
                if t_prev == 0 {
                    return Ok(v0_hat.to_owned());
                }
                let c = self.posterior_coefficients(t, t_prev);
                Ok(&v0_hat * c.x0 + &v_t * c.xt + &noise * c.variance.sqrt())
            }
        }
    }

    /// Mean coefficients and variance of `q(v_prev | v_t, v0)` across an
    /// arbitrary gap `t -> t_prev`.
    pub fn posterior_coefficients(&self, t: usize, t_prev: usize) -> PosteriorCoefficients {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let denom = 1.0 - ab_t;
        PosteriorCoefficients {
            x0: ab_prev.sqrt() * beta / denom,
            xt: alpha.sqrt() * (1.0 - ab_prev) / denom,
            variance: beta * (1.0 - ab_prev) / denom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub x0: f64,
    pub xt: f64,
    pub variance: f64,
}

/// Evenly spaced descending timesteps starting at `T`.
///
/// The stride is `round(T / steps)`; when that would run past timestep 1 the
/// stride falls back to `floor(T / steps)`.
pub fn subset_trajectory(t: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t {
        return invalid(format!("steps = {steps} must lie in [1, {t}]"));
    }
    let mut stride = (t as f64 / steps as f64).round() as usize;
    if stride * (steps - 1) >= t {
        stride = t / steps;
    }
    Ok((0..steps).map(|i| t - i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_hand_product() {
        let ns = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(ns.alpha_bars(), &[0.5, 0.25]);
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn uniform_values() {
        let ns = NoiseSchedule::uniform(10, 0.3).unwrap();
        assert_eq!(ns.alpha_bar(0), 0.7);
        assert!((ns.alpha_bar(5) - 0.35).abs() < 1e-15);
        assert_eq!(ns.alpha_bar(10), UNIFORM_FLOOR);
        assert!(NoiseSchedule::uniform(10, 1.0).is_err());
        assert!(NoiseSchedule::uniform(10, 0.0).is_err());
    }

    #[test]
    fn reconstruction_identity() {
        for ns in [
            NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            NoiseSchedule::uniform(1000, 0.3).unwrap(),
            NoiseSchedule::uniform(7, 0.5).unwrap(),
        ] {
            for t in 1..=ns.steps() {
                let lhs = ns.alpha_bar(t);
                let rhs = (1.0 - ns.beta(t)) * ns.alpha_bar(t - 1);
                assert!(((lhs - rhs) / lhs).abs() < 1e-12, "t={t}");
                assert!(ns.beta(t) > 0.0 && ns.beta(t) < 1.0);
                assert!(ns.alpha_bar(t) < ns.alpha_bar(t - 1));
            }
            assert!(ns.alpha_bar(ns.steps()) <= 1e-2);
        }
    }

    #[test]
    fn q_sample_zero_noise_and_errors() {
        let ns = NoiseSchedule::uniform(10, 0.3).unwrap();
        let v0 = array![[1.0, -2.0], [3.0, 0.5]];
        let z = Array2::zeros((2, 2));
        let out = ns.q_sample(v0.view(), 5, z.view()).unwrap();
        assert_eq!(out, &v0 * 0.35f64.sqrt());
        assert!(ns.q_sample(v0.view(), 0, z.view()).is_err());
        assert!(ns.q_sample(v0.view(), 11, z.view()).is_err());
        assert!(ns.q_sample(v0.view(), 1, Array2::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn q_sample_terminal_is_noise() {
        let ns = NoiseSchedule::uniform(10, 0.3).unwrap();
        let v0 = array![[4.0, -2.0, 1.0]];
        let noise = array![[0.3, 1.1, -0.7]];
        let out = ns.q_sample(v0.view(), 10, noise.view()).unwrap();
        let norm = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let eps = UNIFORM_FLOOR;
        let bound = eps.sqrt() * norm(&v0) + ((1.0 - eps).sqrt() - 1.0).abs() * norm(&noise);
        assert!(norm(&(&out - &noise)) <= bound + 1e-15);
    }

    #[test]
    fn posterior_special_cases() {
        let ns = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let v0 = array![[1.0, 2.0], [-3.0, 0.25]];
        let z = Array2::zeros((2, 2));
        let vt = &v0 * ns.alpha_bar(40).sqrt();
        let out = ns.posterior_sample(vt.view(), v0.view(), 40, 0, z.view(), ReverseMode::Posterior).unwrap();
        assert_eq!(out, v0);
        let out = ns.posterior_sample(vt.view(), v0.view(), 40, 25, z.view(), ReverseMode::Posterior).unwrap();
        let expect = &v0 * ns.alpha_bar(25).sqrt();
        assert!((&out - &expect).iter().all(|d| d.abs() < 1e-12));
        let out = ns.posterior_sample(vt.view(), v0.view(), 40, 25, z.view(), ReverseMode::Renoise).unwrap();
        assert!((&out - &expect).iter().all(|d| d.abs() < 1e-12));
        assert!(ns.posterior_sample(vt.view(), v0.view(), 25, 25, z.view(), ReverseMode::Posterior).is_err());
    }

    #[test]
    fn trajectories() {
        assert_eq!(subset_trajectory(10, 5).unwrap(), vec![10, 8, 6, 4, 2]);
        assert_eq!(subset_trajectory(1000, 1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
        let t50 = subset_trajectory(1000, 50).unwrap();
        assert_eq!(t50.len(), 50);
        assert_eq!(t50[0], 1000);
        assert!(t50.windows(2).all(|w| w[0] - w[1] == 20));
        assert!(subset_trajectory(10, 11).is_err());
        assert!(subset_trajectory(10, 0).is_err());
        for t in 2..60 {
            for s in 1..=t {
                let tr = subset_trajectory(t, s).unwrap();
                assert_eq!(tr.len(), s);
                assert!(tr.iter().all(|&x| (1..=t).contains(&x)));
            }
        }
    }

    #[test]
    fn spec_json_shape() {
        let spec = ScheduleSpec::uniform(1000);
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["kind"], "uniform");
        assert_eq!(json["T"], 1000);
        let back: ScheduleSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }
}

//! Hybrid continuous/discrete diffusion over discrete speech-unit codebooks,
//! the multinomial and absorbing discrete baselines, a small trainable
//! transformer denoiser and a synthetic translation benchmark.
//!
//! Units are integer ids in `[0, K)` indexing the rows of a [`Codebook`].
//! The hybrid process corrupts their embeddings with Gaussian noise and maps
//! back to units by nearest-centroid search at every step.

pub mod baselines;
pub mod cli;
pub mod codebook;
pub mod denoiser;
pub mod error;
pub mod hybrid;
pub mod schedule;
pub mod seed;
pub mod synthbench;
pub mod system;

pub use codebook::{default_codebook, fit_kmeans, make_structured_codebook, Codebook};
pub use denoiser::{Denoiser, DenoiserConfig, OracleDenoiser, Transformer};
pub use error::{Error, Result};
pub use hybrid::{sample, SampleOutput, SamplerConfig};
pub use schedule::{subset_trajectory, NoiseSchedule, ReverseMode, ScheduleKind, ScheduleSpec};
pub use synthbench::{Dataset, SynthPair};
pub use system::System;

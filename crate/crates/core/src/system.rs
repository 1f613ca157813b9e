//! The three generation systems and their forward (corruption) processes.

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::codebook::Codebook;
use crate::error::Result;
use crate::hybrid;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Gaussian corruption in the codebook space, discrete reverse process.
    Hybrid,
    /// Uniform resampling over the unit vocabulary.
    Multinomial,
    /// Replacement by a dedicated mask token.
    Absorbing,
}

impl System {
    pub const ALL: [System; 3] = [System::Hybrid, System::Multinomial, System::Absorbing];

    pub fn name(self) -> &'static str {
        match self {
            System::Hybrid => "hybrid",
            System::Multinomial => "multinomial",
            System::Absorbing => "absorbing",
        }
    }

    /// The process actually run once the K-means mapping switch is applied:
    /// without the mapping the hybrid system is multinomial diffusion.
    pub fn effective(self, kmeans_mapping: bool) -> System {
        match self {
            System::Hybrid if !kmeans_mapping => System::Multinomial,
            other => other,
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Schedule each system is trained with unless told otherwise: uniform for
/// the hybrid process, linear for the discrete baselines.
pub fn default_schedule(system: System) -> ScheduleKind {
    match system {
        System::Hybrid => ScheduleKind::Uniform,
        System::Multinomial | System::Absorbing => ScheduleKind::Linear,
    }
}

/// Draws `x_t` from the system's forward process.
pub fn corrupt(
    system: System,
    cb: &Codebook,
    ns: &NoiseSchedule,
    x0: &[usize],
    t: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    match system {
        System::Hybrid => hybrid::forward_corrupt_with(cb, ns, x0, t, rng),
        System::Multinomial => baselines::multinomial_q_sample_with(ns, x0, t, cb.len(), rng),
        System::Absorbing => baselines::absorbing_q_sample_with(ns, x0, t, cb.len(), rng),
    }
}

//! Corrupts a target with the hybrid forward process and runs the reverse
//! sampler with a reference-knowing denoiser, printing the trajectory.

use unitdiff::hybrid::{decode, forward_corrupt, sample, SamplerConfig};
use unitdiff::synthbench::{generate_dataset, DEFAULT_REPEATS, DEFAULT_SRC_LEN};
use unitdiff::{default_codebook, NoiseSchedule, OracleDenoiser, ReverseMode, System};

fn main() -> unitdiff::Result<()> {
    let cb = default_codebook(0)?;
    let ns = NoiseSchedule::uniform(1000, 0.3)?;
    let data = generate_dataset(&cb, 1, DEFAULT_SRC_LEN, DEFAULT_REPEATS, 3)?;
    let pair = &data.pairs[0];
    println!("source  {:?}", pair.source);
    println!("target  {:?}", pair.target);

    for t in [1, 250, 500, 1000] {
        let xt = forward_corrupt(&cb, &ns, &pair.target, t, 11)?;
        let kept = xt.iter().zip(&pair.target).filter(|(a, b)| a == b).count();
        println!("t = {t:4}: {kept}/{} units unchanged", xt.len());
    }

    let oracle = OracleDenoiser::new(cb.len(), 64, [(&pair.source[..], &pair.target[..])]);
    for mode in [ReverseMode::Posterior, ReverseMode::Renoise] {
        let cfg = SamplerConfig { steps: 5, mode, track_intermediate: true, ..Default::default() };
        let out = sample(&oracle, &cb, &ns, &pair.source, pair.target.len(), &cfg, 5)?;
        println!("{mode:?}: {} denoiser calls, recovered = {}", out.denoiser_calls, out.units == pair.target);
        for e in &out.trace {
            println!("  t = {:4}  x0_hat[..6] = {:?}", e.t, &e.x0_hat[..6]);
        }
    }

    let beam = decode(System::Hybrid, &oracle, Some(&cb), &ns, &pair.source, &SamplerConfig::with_steps(10), 5)?;
    println!("length beam (length, nll): {:?}", beam.candidates);
    Ok(())
}

//! The multinomial and absorbing discrete diffusions: forward corruption
//! statistics and reverse sampling with a reference-knowing denoiser.

use unitdiff::baselines::{absorbing_q_sample, baseline_sample, multinomial_posterior, multinomial_q_sample, CorruptionKind};
use unitdiff::hybrid::SamplerConfig;
use unitdiff::synthbench::{generate_dataset, DEFAULT_REPEATS, DEFAULT_SRC_LEN};
use unitdiff::{default_codebook, NoiseSchedule, OracleDenoiser};

fn main() -> unitdiff::Result<()> {
    let cb = default_codebook(0)?;
    let k = cb.len();
    let ns = NoiseSchedule::uniform(1000, 0.3)?;
    let data = generate_dataset(&cb, 1, DEFAULT_SRC_LEN, DEFAULT_REPEATS, 4)?;
    let pair = &data.pairs[0];

    for t in [1, 500, 999] {
        let m = multinomial_q_sample(&ns, &pair.target, t, k, 1)?;
        let a = absorbing_q_sample(&ns, &pair.target, t, k, 1)?;
        let same = m.iter().zip(&pair.target).filter(|(x, y)| x == y).count();
        let masked = a.iter().filter(|&&u| u == k).count();
        println!("t = {t:4}: multinomial kept {same:2}/{n}, absorbing masked {masked:2}/{n}", n = pair.target.len());
    }

    let probs = [0.7, 0.2, 0.1];
    println!("posterior over 3 states at (t, t_prev) = (500, 400), x_t = 1: {:?}", multinomial_posterior(&ns, 1, &probs, 500, 400));

    let oracle = OracleDenoiser::new(k, 64, [(&pair.source[..], &pair.target[..])]);
    for kind in [CorruptionKind::Multinomial, CorruptionKind::absorbing(k)] {
        let out = baseline_sample(kind, &oracle, &ns, &pair.source, pair.target.len(), &SamplerConfig::with_steps(20), 9)?;
        println!("{kind:?}: recovered = {}", out.units == pair.target);
    }
    Ok(())
}

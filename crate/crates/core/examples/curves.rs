//! Nearest-neighbour accuracy of the hybrid corruption under both schedules,
//! and the intermediate-prediction curve of a checkpoint if one is given.
//!
//! cargo run --release --example curves -- [checkpoint.json]

use unitdiff::denoiser::checkpoint::Checkpoint;
use unitdiff::hybrid::{intermediate_curve, knn_accuracy_curve, SamplerConfig};
use unitdiff::synthbench::{generate_splits, Metric, DEFAULT_REPEATS, DEFAULT_SRC_LEN};
use unitdiff::{cli, default_codebook, NoiseSchedule};

fn main() -> unitdiff::Result<()> {
    let cb = default_codebook(0)?;
    let (_, test) = generate_splits(&cb, 2000, 200, DEFAULT_SRC_LEN, DEFAULT_REPEATS, 0)?;
    let targets: Vec<Vec<usize>> = test.pairs.iter().map(|p| p.target.clone()).collect();
    let ts = cli::knn_timesteps(1000, 100);
    let lin = knn_accuracy_curve(&cb, &NoiseSchedule::linear(1000, 1e-4, 0.02)?, &targets, &ts, 0)?;
    let uni = knn_accuracy_curve(&cb, &NoiseSchedule::uniform(1000, 0.3)?, &targets, &ts, 0)?;
    println!("{:>5} {:>8} {:>8}", "t", "linear", "uniform");
    for ((t, a), (_, b)) in lin.iter().zip(&uni) {
        println!("{t:>5} {a:>8.4} {b:>8.4}");
    }

    if let Some(path) = std::env::args().nth(1) {
        let ckpt = Checkpoint::load(&path)?;
        let ns = ckpt.manifest.schedule.build()?;
        let cfg = SamplerConfig { steps: 20, track_intermediate: true, ..Default::default() };
        let traces = cli::decode_traces(ckpt.manifest.system, &ckpt.model, &cb, &ns, &test, &cfg, 0)?;
        for (step, t, score) in intermediate_curve(&traces, &targets, &Metric::MetaBleu(&cb))? {
            println!("step {step:2}  t = {t:4}  meta-BLEU {score:6.2}");
        }
    }
    Ok(())
}

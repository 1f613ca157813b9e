//! Trains the desk-scale denoiser for one system and saves a checkpoint.
//!
//! cargo run --release --example train_denoiser -- [hybrid|multinomial|absorbing] [steps] [out.json] [uniform|linear]

use std::time::Instant;

use unitdiff::denoiser::checkpoint::Checkpoint;
use unitdiff::denoiser::train::{train_with, TrainConfig};
use unitdiff::synthbench::{generate_splits, DEFAULT_REPEATS, DEFAULT_SRC_LEN};
use unitdiff::schedule::ScheduleKind;
use unitdiff::system::default_schedule;
use unitdiff::{default_codebook, DenoiserConfig, ScheduleSpec, System, Transformer};

fn main() -> unitdiff::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let system = match args.first().map(String::as_str) {
        Some("multinomial") => System::Multinomial,
        Some("absorbing") => System::Absorbing,
        _ => System::Hybrid,
    };
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args.get(2).cloned().unwrap_or_else(|| format!("{system}.json"));

    let cb = default_codebook(0)?;
    let (train, _) = generate_splits(&cb, 2000, 200, DEFAULT_SRC_LEN, DEFAULT_REPEATS, 0)?;
    let kind = match args.get(3).map(String::as_str) {
        Some("linear") => ScheduleKind::Linear,
        Some("uniform") => ScheduleKind::Uniform,
        _ => default_schedule(system),
    };
    let spec = ScheduleSpec::of_kind(kind, 1000);
    let ns = spec.build()?;
    let cfg = DenoiserConfig::desk(cb.len(), cb.num_classes());
    let mut model = Transformer::new(cfg, 0)?;
    println!("{system}: {} parameters, {steps} steps", model.num_params());

    let tc = TrainConfig { total_steps: steps, warmup_steps: (steps / 10).min(500), ..TrainConfig::default() };
    let start = Instant::now();
    train_with(&mut model, &train.pairs, system, &cb, &ns, &tc, |log| {
        if log.step % 50 == 0 || log.step == 1 {
            println!(
                "step {:5}  loss {:.4}  token {:.4}  length {:.4}  lr {:.2e}  {:.1}s",
                log.step,
                log.loss,
                log.token_loss,
                log.length_loss,
                log.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    Checkpoint::new(model, system, spec, steps, tc.seed).save(&out)?;
    println!("saved {out}");
    Ok(())
}

//! Evaluates saved checkpoints on the synthetic test split at several
//! decoding budgets and prints a comparison table.
//!
//! cargo run --release --example benchmark -- hybrid.json multinomial.json absorbing.json

use unitdiff::denoiser::checkpoint::Checkpoint;
use unitdiff::synthbench::{evaluate_system, generate_splits, DEFAULT_REPEATS, DEFAULT_SRC_LEN};
use unitdiff::{default_codebook, SamplerConfig};

fn main() -> unitdiff::Result<()> {
    let paths: Vec<String> = std::env::args().skip(1).collect();
    if paths.is_empty() {
        eprintln!("usage: benchmark <checkpoint.json>... (see the train_denoiser example)");
        std::process::exit(2);
    }
    let cb = default_codebook(0)?;
    let (_, test) = generate_splits(&cb, 2000, 200, DEFAULT_SRC_LEN, DEFAULT_REPEATS, 0)?;
    println!("{:<18} {:>5} {:>9} {:>8} {:>7} {:>8}", "system", "steps", "meta_bleu", "unit_acc", "edit", "ms");
    for path in &paths {
        let ckpt = Checkpoint::load(path)?;
        let ns = ckpt.manifest.schedule.build()?;
        for steps in [5, 10, 20, 50] {
            let cfg = SamplerConfig::with_steps(steps);
            let r = evaluate_system(ckpt.manifest.system, &ckpt.model, &cb, &ns, &test, &cfg, 0)?.report;
            println!(
                "{:<18} {:>5} {:>9.2} {:>8.4} {:>7.3} {:>8}",
                r.system, r.steps, r.meta_bleu, r.unit_acc, r.edit, r.wall_ms
            );
        }
    }
    Ok(())
}

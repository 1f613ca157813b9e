use rand::Rng as _;
use unitdiff::codebook::default_codebook;
use unitdiff::denoiser::train::{evaluate_loss, token_loss, train, TrainConfig};
use unitdiff::denoiser::{Denoiser, DenoiserConfig, OracleDenoiser, Transformer, UniformDenoiser};
use unitdiff::schedule::NoiseSchedule;
use unitdiff::synthbench::{generate_dataset, SynthPair, DEFAULT_REPEATS, DEFAULT_SRC_LEN};
use unitdiff::{Error, System};

fn setup() -> (unitdiff::Codebook, NoiseSchedule, Vec<SynthPair>) {
    let cb = default_codebook(0).unwrap();
    let ns = NoiseSchedule::uniform(1000, 0.3).unwrap();
    let data = generate_dataset(&cb, 64, DEFAULT_SRC_LEN, DEFAULT_REPEATS, 1).unwrap().pairs;
    (cb, ns, data)
}

fn desk(cb: &unitdiff::Codebook) -> DenoiserConfig {
    DenoiserConfig::desk(cb.len(), cb.num_classes())
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (cb, ns, data) = setup();
    let mut model = Transformer::new(desk(&cb), 0).unwrap();
    let before = model.params().to_vec();
    let tc = TrainConfig { lr: 0.0, total_steps: 40, warmup_steps: 4, batch_size: 4, ..Default::default() };
    let report = train(&mut model, &data, System::Hybrid, &cb, &ns, &tc).unwrap();
    assert_eq!(model.params(), &before[..]);
    assert!(report.history.iter().all(|s| s.lr == 0.0));
    let losses: Vec<f64> = report.history.iter().map(|s| s.loss).collect();
    let half = losses.len() / 2;
    let first = losses[..half].iter().sum::<f64>() / half as f64;
    let second = losses[half..].iter().sum::<f64>() / (losses.len() - half) as f64;
    assert!((first - second).abs() / first < 0.05, "{first} vs {second}");
}

#[test]
fn memorizes_a_single_example() {
    let (cb, ns, data) = setup();
    let single = vec![data[0].clone()];
    let mut model = Transformer::new(desk(&cb), 1).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        warmup_steps: 50,
        total_steps: 500,
        batch_size: 4,
        label_smoothing: 0.0,
        ..Default::default()
    };
    let report = train(&mut model, &single, System::Hybrid, &cb, &ns, &tc).unwrap();
    let initial = report.history[0].token_loss;
    let last = report.history[report.history.len() - 20..].iter().map(|s| s.token_loss).sum::<f64>() / 20.0;
    assert!(last < 0.1 * initial, "initial {initial}, final {last}");

    // The trained model conditions on the timestep.
    let ctx = model.encode(&single[0].source).unwrap();
    let x_t = vec![5usize; single[0].target.len()];
    let a = model.logits(&ctx, &x_t, 10).unwrap();
    let b = model.logits(&ctx, &x_t, 900).unwrap();
    assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
}

#[test]
fn training_is_deterministic() {
    let (cb, ns, data) = setup();
    let tc = TrainConfig { total_steps: 6, warmup_steps: 2, batch_size: 5, seed: 3, ..Default::default() };
    let run = || {
        let mut m = Transformer::new(desk(&cb), 3).unwrap();
        let r = train(&mut m, &data, System::Absorbing, &cb, &ns, &tc).unwrap();
        (r.history.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(), m.params().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn divergence_is_reported() {
    let (cb, ns, data) = setup();
    let mut model = Transformer::new(desk(&cb), 0).unwrap();
    let tc = TrainConfig { lr: 1e300, total_steps: 20, warmup_steps: 0, batch_size: 2, ..Default::default() };
    match train(&mut model, &data, System::Multinomial, &cb, &ns, &tc) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(train(&mut model, &[], System::Hybrid, &cb, &ns, &TrainConfig::default()).is_err());
}

#[test]
fn loss_reference_points() {
    let (cb, ns, data) = setup();
    let batch = &data[..8];
    let oracle = OracleDenoiser::new(cb.len(), 64, batch.iter().map(|p| (&p.source[..], &p.target[..])));
    let l = evaluate_loss(&oracle, System::Hybrid, &cb, &ns, batch, 0.0, 1).unwrap();
    assert!(l.token.abs() < 1e-9 && l.length.abs() < 1e-9, "{l:?}");
    let uniform = UniformDenoiser { num_units: cb.len(), vocab: cb.len() + 2, max_len: 64 };
    let l = evaluate_loss(&uniform, System::Absorbing, &cb, &ns, batch, 0.0, 1).unwrap();
    assert!((l.token - ((cb.len() + 2) as f64).ln()).abs() < 1e-12);
    assert!((l.length - 64f64.ln()).abs() < 1e-12);
}

/// Targets drawn independently of the source carry nothing to learn once
/// `x_t` is pure noise.
#[test]
fn shuffled_labels_stay_near_chance() {
    let (cb, ns, _) = setup();
    let k = cb.len();
    let mut rng = unitdiff::seed::rng(77);
    let mut random_pairs = |n: usize| -> Vec<SynthPair> {
        (0..n)
            .map(|_| {
                let source: Vec<usize> = (0..rng.gen_range(4..8)).map(|_| rng.gen_range(0..cb.num_classes())).collect();
                let target: Vec<usize> = (0..rng.gen_range(6..12)).map(|_| rng.gen_range(0..k)).collect();
                SynthPair { source, target, meta_target: vec![] }
            })
            .collect()
    };
    // Fewer examples are drawn than the set holds, so nothing can be memorized.
    let train_set = random_pairs(4000);
    let held_out = random_pairs(100);
    let mut model = Transformer::new(desk(&cb), 5).unwrap();
    let tc = TrainConfig { total_steps: 300, warmup_steps: 30, batch_size: 8, lr: 1e-3, ..Default::default() };
    train(&mut model, &train_set, System::Hybrid, &cb, &ns, &tc).unwrap();

    let mut total = 0.0;
    let mut count = 0;
    for (i, p) in held_out.iter().enumerate() {
        let x_t = unitdiff::hybrid::forward_corrupt(&cb, &ns, &p.target, ns.steps(), i as u64).unwrap();
        let logits = model.forward(&x_t, ns.steps(), &p.source).unwrap();
        total += token_loss(&logits, &p.target, k, 0.0).0;
        count += p.target.len();
    }
    let loss = total / count as f64;
    let chance = (k as f64).ln();
    assert!((loss - chance).abs() / chance < 0.05, "{loss} vs ln K = {chance}");
}

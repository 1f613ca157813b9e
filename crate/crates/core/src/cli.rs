//! The `unitdiff` command line.
//!
//! Every command takes `--seed`; stochastic components draw from named
//! sub-seeds of it. Flags override values from `--config`, which override
//! the built-in defaults. Files a failed command created are removed.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::codebook::{self, make_structured_codebook, Codebook};
use crate::denoiser::checkpoint::Checkpoint;
use crate::denoiser::train::{train_with, TrainConfig};
use crate::denoiser::{DenoiserConfig, OracleDenoiser, Transformer};
use crate::error::{invalid, Error, Result};
use crate::hybrid::{decode, intermediate_curve, knn_accuracy_curve, SamplerConfig, TraceEntry};
use crate::schedule::{NoiseSchedule, ReverseMode, ScheduleKind, ScheduleSpec, DEFAULT_T};
use crate::synthbench::{
    evaluate_system, generate_splits, Dataset, Metric, Split, DEFAULT_REPEATS, DEFAULT_SRC_LEN,
    DEFAULT_TEST_PAIRS, DEFAULT_TRAIN_PAIRS,
};
use crate::seed;
use crate::system::{default_schedule, System};

pub const THREADS_ENV: &str = "UNITDIFF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "unitdiff", version, about = "Diffusion over discrete unit codebooks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a structured synthetic codebook.
    MakeCodebook(MakeCodebookArgs),
    /// Generate train/test JSONL files for the synthetic benchmark.
    GenData(GenDataArgs),
    /// Train a denoiser and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Decode a test set and report metrics.
    Eval(EvalArgs),
    /// Diagnostic curves.
    #[command(subcommand)]
    Curves(CurvesCommand),
}

#[derive(Debug, Args)]
pub struct MakeCodebookArgs {
    #[arg(long, default_value_t = codebook::DEFAULT_CLASSES)]
    pub classes: usize,
    #[arg(long, default_value_t = codebook::DEFAULT_PER_CLASS)]
    pub per_class: usize,
    #[arg(long, default_value_t = codebook::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = codebook::DEFAULT_S_META)]
    pub s_meta: f64,
    #[arg(long, default_value_t = codebook::DEFAULT_S_INTRA)]
    pub s_intra: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "codebook.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TRAIN_PAIRS)]
    pub train_n: usize,
    #[arg(long, default_value_t = DEFAULT_TEST_PAIRS)]
    pub test_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives `train.jsonl` and `test.jsonl`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Values a `--config` JSON file may supply. Unset fields fall back to the
/// defaults; command-line flags take precedence over both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub codebook: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub system: Option<System>,
    pub schedule: Option<ScheduleKind>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub sampler: Option<SamplerConfig>,
    pub train: Option<TrainConfig>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => Ok(Self::default()),
        }
    }
}

fn pick<T>(flag: Option<T>, config: Option<T>, name: &str) -> Result<T> {
    match flag.or(config) {
        Some(v) => Ok(v),
        None => invalid(format!("--{name} is required")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Training pairs (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub system: Option<System>,
    /// Defaults to uniform for hybrid and linear for the baselines.
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint manifest; the blob goes next to it as `.bin`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Test pairs (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ReverseMode>,
    /// Run the hybrid system without the codebook mapping.
    #[arg(long)]
    pub no_kmeans: bool,
    /// Replace the model by a denoiser that knows the test references.
    #[arg(long)]
    pub oracle_denoiser: bool,
    /// System and schedule for `--oracle-denoiser` runs (otherwise read
    /// from the checkpoint).
    #[arg(long, value_enum)]
    pub system: Option<System>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comparison CSV a row is appended to.
    #[arg(long, default_value = "results.csv")]
    pub csv: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CurvesCommand {
    /// Fraction of units surviving hybrid corruption, per timestep.
    KnnAccuracy(KnnArgs),
    /// Quality of the intermediate `x0` predictions along the reverse process.
    Intermediate(IntermediateArgs),
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    /// Sequences whose targets are corrupted (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    pub schedule: ScheduleKind,
    #[arg(long = "T", default_value_t = DEFAULT_T)]
    pub t: usize,
    /// Evaluate every `every`-th timestep (1 and T are always included).
    #[arg(long, default_value_t = 10)]
    pub every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "knn_accuracy.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricName {
    MetaBleu,
    UnitAcc,
    Edit,
}

#[derive(Debug, Args)]
pub struct IntermediateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, value_enum, default_value = "posterior")]
    pub mode: ReverseMode,
    #[arg(long, value_enum, default_value = "meta-bleu")]
    pub metric: MetricName,
    #[arg(long)]
    pub oracle_denoiser: bool,
    #[arg(long, value_enum, default_value = "hybrid")]
    pub system: System,
    /// Defaults to the system's training schedule.
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long = "T", default_value_t = DEFAULT_T)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "intermediate.csv")]
    pub out: PathBuf,
    /// Also write every decoded trace as JSONL.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

/// Files created by the running command; removed unless `commit` is called.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn track(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn make_codebook(a: &MakeCodebookArgs, out: &mut Outputs) -> Result<()> {
    let cb = make_structured_codebook(a.classes, a.per_class, a.dim, a.s_meta, a.s_intra, a.seed)?;
    cb.save(out.track(&a.out))?;
    println!("K = {}, D = {}, min centroid gap = {:.6}", cb.len(), cb.dim(), cb.min_centroid_gap());
    Ok(())
}

fn gen_data(a: &GenDataArgs, out: &mut Outputs) -> Result<()> {
    let cb = Codebook::load(&a.codebook)?;
    let (train, test) = generate_splits(&cb, a.train_n, a.test_n, DEFAULT_SRC_LEN, DEFAULT_REPEATS, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    train.write_jsonl(out.track(&a.out_dir.join("train.jsonl")))?;
    test.write_jsonl(out.track(&a.out_dir.join("test.jsonl")))?;
    println!("wrote {} train and {} test pairs to {}", train.len(), test.len(), a.out_dir.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut Outputs) -> Result<()> {
    let c = ExperimentConfig::load(a.config.as_deref())?;
    let cb = Codebook::load(pick(a.codebook.clone(), c.codebook, "codebook")?)?;
    let data = Dataset::read_jsonl(pick(a.data.clone(), c.data, "data")?, &cb, Split::Train)?;
    let system = a.system.or(c.system).unwrap_or(System::Hybrid);
    let spec = ScheduleSpec::of_kind(a.schedule.or(c.schedule).unwrap_or(default_schedule(system)), a.t.or(c.t).unwrap_or(DEFAULT_T));
    let ns = spec.build()?;
    let base = c.train.unwrap_or_default();
    let total_steps = a.steps.unwrap_or(base.total_steps);
    let tc = TrainConfig {
        total_steps,
        warmup_steps: a.warmup.unwrap_or(base.warmup_steps.min(total_steps)),
        batch_size: a.batch.unwrap_or(base.batch_size),
        lr: a.lr.unwrap_or(base.lr),
        seed: a.seed.or(c.seed).unwrap_or(base.seed),
        ..base
    };
    let ckpt_path = a.out.clone().or(c.out).unwrap_or_else(|| PathBuf::from("checkpoint.json"));
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| ckpt_path.with_extension("csv"));

    let cfg = DenoiserConfig::desk(cb.len(), cb.num_classes());
    let mut model = Transformer::new(cfg, seed::sub_seed(tc.seed, "model"))?;
    let report = train_with(&mut model, &data.pairs, system, &cb, &ns, &tc, |log| {
        if log.step % 100 == 0 || log.step == tc.total_steps {
            eprintln!("step {:6}  loss {:.4}  lr {:.3e}", log.step, log.loss, log.lr);
        }
    })?;
    report.write_csv(out.track(&csv_path))?;
    out.track(&ckpt_path.with_extension("bin"));
    Checkpoint::new(model, system, spec, tc.total_steps, tc.seed).save(out.track(&ckpt_path))?;
    println!("checkpoint {} ({} steps), loss log {}", ckpt_path.display(), tc.total_steps, csv_path.display());
    Ok(())
}

fn oracle_for(cb: &Codebook, data: &Dataset) -> OracleDenoiser {
    let max_len = data.max_target_len().max(1);
    OracleDenoiser::new(cb.len(), max_len, data.pairs.iter().map(|p| (&p.source[..], &p.target[..])))
}

fn eval_cmd(a: &EvalArgs, out: &mut Outputs) -> Result<()> {
    let c = ExperimentConfig::load(a.config.as_deref())?;
    let cb = Codebook::load(pick(a.codebook.clone(), c.codebook.clone(), "codebook")?)?;
    let data = Dataset::read_jsonl(pick(a.data.clone(), c.data.clone(), "data")?, &cb, Split::Test)?;
    let base = c.sampler.clone().unwrap_or_default();
    let cfg = SamplerConfig {
        steps: a.steps.unwrap_or(base.steps),
        length_beam: a.beam.unwrap_or(base.length_beam),
        mode: a.mode.unwrap_or(base.mode),
        kmeans_mapping: base.kmeans_mapping && !a.no_kmeans,
        track_intermediate: false,
    };
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let evaluation = if a.oracle_denoiser {
        let system = a.system.or(c.system).unwrap_or(System::Hybrid);
        let spec = ScheduleSpec::of_kind(a.schedule.or(c.schedule).unwrap_or(default_schedule(system)), a.t.or(c.t).unwrap_or(DEFAULT_T));
        evaluate_system(system, &oracle_for(&cb, &data), &cb, &spec.build()?, &data, &cfg, seed)?
    } else {
        let ckpt = Checkpoint::load(pick(a.checkpoint.clone(), c.checkpoint.clone(), "checkpoint")?)?;
        if ckpt.model.config().num_units != cb.len() {
            return invalid("checkpoint and codebook disagree on K");
        }
        let ns = ckpt.manifest.schedule.build()?;
        evaluate_system(ckpt.manifest.system, &ckpt.model, &cb, &ns, &data, &cfg, seed)?
    };
    let r = &evaluation.report;
    if let Some(path) = a.out.clone().or(c.out) {
        let mut json = serde_json::to_string_pretty(r)?;
        json.push('\n');
        write_text(&out.track(&path), &json)?;
    }
    out.track(&a.csv);
    r.append_csv(&a.csv)?;
    println!(
        "{} steps={} meta_bleu={:.2} unit_acc={:.4} edit={:.3} ({} ms)",
        r.system, r.steps, r.meta_bleu, r.unit_acc, r.edit, r.wall_ms
    );
    Ok(())
}

/// `1, every, 2·every, …, T`, deduplicated.
pub fn knn_timesteps(t: usize, every: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = std::iter::once(1).chain((every.max(1)..=t).step_by(every.max(1))).collect();
    ts.push(t);
    ts.sort_unstable();
    ts.dedup();
    ts
}

fn knn_cmd(a: &KnnArgs, out: &mut Outputs) -> Result<()> {
    let cb = Codebook::load(&a.codebook)?;
    let data = Dataset::read_jsonl(&a.data, &cb, Split::Test)?;
    let ns = ScheduleSpec::of_kind(a.schedule, a.t).build()?;
    let targets: Vec<Vec<usize>> = data.pairs.into_iter().map(|p| p.target).collect();
    let curve = knn_accuracy_curve(&cb, &ns, &targets, &knn_timesteps(a.t, a.every), a.seed)?;
    let mut w = csv::Writer::from_path(out.track(&a.out))?;
    w.write_record(["t", "value"])?;
    for (t, v) in &curve {
        w.write_record([t.to_string(), format!("{v:.6}")])?;
    }
    w.flush()?;
    println!("{} points written to {}", curve.len(), a.out.display());
    Ok(())
}

fn metric_for<'a>(name: MetricName, cb: &'a Codebook) -> Metric<'a> {
    match name {
        MetricName::MetaBleu => Metric::MetaBleu(cb),
        MetricName::UnitAcc => Metric::UnitAccuracy,
        MetricName::Edit => Metric::NegEditDistance,
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    index: usize,
    trace: &'a [TraceEntry],
}

fn intermediate_cmd(a: &IntermediateArgs, out: &mut Outputs) -> Result<()> {
    let cb = Codebook::load(&a.codebook)?;
    let data = Dataset::read_jsonl(&a.data, &cb, Split::Test)?;
    let cfg = SamplerConfig { steps: a.steps, length_beam: a.beam, mode: a.mode, track_intermediate: true, kmeans_mapping: true };
    let traces: Vec<Vec<TraceEntry>> = if a.oracle_denoiser {
        let ns = ScheduleSpec::of_kind(a.schedule.unwrap_or(default_schedule(a.system)), a.t).build()?;
        let oracle = oracle_for(&cb, &data);
        decode_traces(a.system, &oracle, &cb, &ns, &data, &cfg, a.seed)?
    } else {
        let path = match &a.checkpoint {
            Some(p) => p,
            None => return invalid("--checkpoint is required unless --oracle-denoiser is set"),
        };
        let ckpt = Checkpoint::load(path)?;
        let ns = ckpt.manifest.schedule.build()?;
        decode_traces(ckpt.manifest.system, &ckpt.model, &cb, &ns, &data, &cfg, a.seed)?
    };
    let refs: Vec<Vec<usize>> = data.pairs.iter().map(|p| p.target.clone()).collect();
    let curve = intermediate_curve(&traces, &refs, &metric_for(a.metric, &cb))?;
    let mut w = csv::Writer::from_path(out.track(&a.out))?;
    w.write_record(["step", "t", "score"])?;
    for (step, t, score) in &curve {
        w.write_record([step.to_string(), t.to_string(), format!("{score:.6}")])?;
    }
    w.flush()?;
    if let Some(path) = &a.traces {
        let mut text = String::new();
        for (index, trace) in traces.iter().enumerate() {
            text.push_str(&serde_json::to_string(&TraceLine { index, trace })?);
            text.push('\n');
        }
        write_text(&out.track(path), &text)?;
    }
    println!("{} steps written to {}", curve.len(), a.out.display());
    Ok(())
}

/// Decodes every pair with length beam and returns the winning traces.
pub fn decode_traces<D: crate::denoiser::Denoiser>(
    system: System,
    d: &D,
    cb: &Codebook,
    ns: &NoiseSchedule,
    data: &Dataset,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<TraceEntry>>> {
    use rayon::prelude::*;
    data.pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = seed::sub_seed(seed, &format!("eval-{i}"));
            Ok(decode(system, d, Some(cb), ns, &p.source, cfg, s)?.best.trace)
        })
        .collect()
}

/// Applies `UNITDIFF_THREADS` to the global thread pool.
pub fn configure_threads(env: &HashMap<String, String>) -> Result<()> {
    if let Some(v) = env.get(THREADS_ENV) {
        let n: usize = match v.parse() {
            Ok(n) if n >= 1 => n,
            _ => return invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        };
        // A pool that is already initialised keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut out = Outputs::default();
    match &cli.command {
        Command::MakeCodebook(a) => make_codebook(a, &mut out)?,
        Command::GenData(a) => gen_data(a, &mut out)?,
        Command::Train(a) => train_cmd(a, &mut out)?,
        Command::Eval(a) => eval_cmd(a, &mut out)?,
        Command::Curves(CurvesCommand::KnnAccuracy(a)) => knn_cmd(a, &mut out)?,
        Command::Curves(CurvesCommand::Intermediate(a)) => intermediate_cmd(a, &mut out)?,
    }
    out.commit();
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let env: HashMap<String, String> = std::env::vars().collect();
    match configure_threads(&env).and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { .. } = e {
                eprintln!("hint: lower --lr or increase --warmup");
            }
            ExitCode::FAILURE
        }
    }
}

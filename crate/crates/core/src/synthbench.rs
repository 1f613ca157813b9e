//! Synthetic unit-translation benchmark and its metrics.
//!
//! A source is a sequence of meta classes with no immediate repeats. Each
//! source symbol emits a run of units drawn from that class, so collapsing
//! the class runs of a target recovers its source. Hypotheses are scored on
//! collapsed class sequences (meta-BLEU), with exact-unit accuracy and edit
//! distance reported alongside.

use std::collections::HashMap;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::hybrid::{decode, SamplerConfig, TraceEntry};
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::system::System;

pub const DEFAULT_TRAIN_PAIRS: usize = 2000;
pub const DEFAULT_TEST_PAIRS: usize = 200;
pub const DEFAULT_SRC_LEN: (usize, usize) = (8, 16);
pub const DEFAULT_REPEATS: (usize, usize) = (2, 4);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SynthPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(skip)]
    pub meta_target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SynthPair>,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_target_len(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).max().unwrap_or(0)
    }

    /// One `{"source":[..],"target":[..]}` object per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a JSONL dataset, recomputing meta targets from the codebook.
    pub fn read_jsonl(path: impl AsRef<Path>, cb: &Codebook, split: Split) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut pairs = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut pair: SynthPair = serde_json::from_str(&line)?;
            pair.meta_target = cb.meta_of(&pair.target)?;
            pairs.push(pair);
        }
        Ok(Self { pairs, split, seed: 0 })
    }
}

fn check_range(name: &str, r: (usize, usize)) -> Result<()> {
    if r.0 == 0 || r.0 > r.1 {
        return invalid(format!("{name} range {r:?} must satisfy 1 <= min <= max"));
    }
    Ok(())
}

/// Draws `n_pairs` pairs; deterministic in `seed`.
pub fn generate_dataset(
    cb: &Codebook,
    n_pairs: usize,
    src_len_range: (usize, usize),
    repeat_range: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    generate_excluding(cb, n_pairs, src_len_range, repeat_range, seed, Split::Train, &HashSet::new())
}

fn generate_excluding(
    cb: &Codebook,
    n_pairs: usize,
    src_len_range: (usize, usize),
    repeat_range: (usize, usize),
    seed: u64,
    split: Split,
    exclude: &HashSet<(Vec<usize>, Vec<usize>)>,
) -> Result<Dataset> {
    let members = cb.class_members()?;
    check_range("source length", src_len_range)?;
    check_range("repeat", repeat_range)?;
    let classes = members.len();
    if classes < 2 && src_len_range.1 > 1 {
        return invalid("need at least two classes to avoid immediate repeats");
    }
    let mut rng = seed::rng(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    while pairs.len() < n_pairs {
        attempts += 1;
        if attempts > 1000 * (n_pairs + 1) {
            return invalid("could not draw enough pairs outside the excluded set");
        }
        let len = rng.gen_range(src_len_range.0..=src_len_range.1);
        let mut source = Vec::with_capacity(len);
        for i in 0..len {
            let sym = if i == 0 {
                rng.gen_range(0..classes)
            } else {
                // Uniform over the classes other than the previous one.
                let prev = source[i - 1];
                let r = rng.gen_range(0..classes - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            };
            source.push(sym);
        }
        let mut target = Vec::new();
        let mut meta_target = Vec::new();
        for &sym in &source {
            let reps = rng.gen_range(repeat_range.0..=repeat_range.1);
            for _ in 0..reps {
                let pool = &members[sym];
                target.push(pool[rng.gen_range(0..pool.len())]);
                meta_target.push(sym);
            }
        }
        if exclude.contains(&(source.clone(), target.clone())) {
            continue;
        }
        pairs.push(SynthPair { source, target, meta_target });
    }
    Ok(Dataset { pairs, split, seed })
}

/// Train and test splits from disjoint derived seeds; train pairs identical
/// to a test pair are redrawn.
pub fn generate_splits(
    cb: &Codebook,
    n_train: usize,
    n_test: usize,
    src_len_range: (usize, usize),
    repeat_range: (usize, usize),
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return invalid("train and test splits must be non-empty");
    }
    let test_seed = seed::sub_seed(seed, "data-test");
    let train_seed = seed::sub_seed(seed, "data-train");
    let test = generate_excluding(cb, n_test, src_len_range, repeat_range, test_seed, Split::Test, &HashSet::new())?;
    let seen: HashSet<_> = test.pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect();
    let train = generate_excluding(cb, n_train, src_len_range, repeat_range, train_seed, Split::Train, &seen)?;
    Ok((train, test))
}

/// Removes consecutive duplicates.
pub fn collapse_runs(seq: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(seq.len());
    for &s in seq {
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

pub fn unit_accuracy(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if hyp.len() != reference.len() || hyp.is_empty() {
        return invalid(format!("unit accuracy needs equal non-empty lengths, got {} and {}", hyp.len(), reference.len()));
    }
    Ok(hyp.iter().zip(reference).filter(|(a, b)| a == b).count() as f64 / hyp.len() as f64)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over already-tokenized sequences, in percent. Orders with
/// zero matches use add-one smoothing.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return invalid("BLEU needs a non-empty corpus with one reference per hypothesis");
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|i| {
            if matches[i] == 0 {
                (1.0 / (totals[i] as f64 + 1.0)).ln()
            } else {
                (matches[i] as f64 / totals[i] as f64).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * log_precision.exp())
}

/// BLEU-4 over run-collapsed meta-label sequences.
pub fn meta_bleu(cb: &Codebook, hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    let to_meta = |seqs: &[Vec<usize>]| -> Result<Vec<Vec<usize>>> {
        seqs.iter().map(|s| Ok(collapse_runs(&cb.meta_of(s)?))).collect()
    };
    corpus_bleu(&to_meta(hyps)?, &to_meta(refs)?)
}

/// Quality measures usable on intermediate predictions.
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    MetaBleu(&'a Codebook),
    /// Mean unit accuracy; pairs of unequal length score 0.
    UnitAccuracy,
    /// Negated mean unit edit distance (0 is best).
    NegEditDistance,
}

impl Metric<'_> {
    pub fn score(&self, hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
        if hyps.is_empty() || hyps.len() != refs.len() {
            return invalid("metric needs matching non-empty corpora");
        }
        let n = hyps.len() as f64;
        match self {
            Metric::MetaBleu(cb) => meta_bleu(cb, hyps, refs),
            Metric::UnitAccuracy => Ok(hyps
                .iter()
                .zip(refs)
                .map(|(h, r)| unit_accuracy(h, r).unwrap_or(0.0))
                .sum::<f64>()
                / n),
            Metric::NegEditDistance => {
                Ok(-(hyps.iter().zip(refs).map(|(h, r)| levenshtein(h, r) as f64).sum::<f64>() / n))
            }
        }
    }
}

/// One row of the system comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub steps: usize,
    pub meta_bleu: f64,
    /// Mean unit accuracy over hypotheses whose length matches the reference.
    pub unit_acc: f64,
    /// Mean unit-level edit distance.
    pub edit: f64,
    pub wall_ms: u64,
    pub seed: u64,
}

pub const REPORT_CSV_HEADER: [&str; 6] = ["system", "steps", "meta_bleu", "unit_acc", "edit", "seed"];

impl MetricsReport {
    /// Appends this report to a comparison CSV, writing the header when the
    /// file is new. Wall time is left out so rows are reproducible.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(REPORT_CSV_HEADER)?;
        }
        w.write_record([
            self.system.clone(),
            self.steps.to_string(),
            format!("{:.4}", self.meta_bleu),
            format!("{:.4}", self.unit_acc),
            format!("{:.4}", self.edit),
            self.seed.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Decoded hypotheses plus the aggregate report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub hypotheses: Vec<Vec<usize>>,
    /// Per-pair traces of the winning candidate; empty unless
    /// `track_intermediate` is set.
    pub traces: Vec<Vec<TraceEntry>>,
}

/// Decodes every pair with length-beam sampling and scores the corpus.
pub fn evaluate_system<D: Denoiser>(
    system: System,
    model: &D,
    cb: &Codebook,
    ns: &NoiseSchedule,
    dataset: &Dataset,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return invalid("evaluation dataset is empty");
    }
    let start = Instant::now();
    let decoded: Vec<(Vec<usize>, Vec<TraceEntry>)> = dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = seed::sub_seed(seed, &format!("eval-{i}"));
            let best = decode(system, model, Some(cb), ns, &p.source, cfg, s)?.best;
            Ok((best.units, best.trace))
        })
        .collect::<Result<_>>()?;
    let (hypotheses, traces): (Vec<Vec<usize>>, Vec<Vec<TraceEntry>>) = decoded.into_iter().unzip();
    let traces = if cfg.track_intermediate { traces } else { Vec::new() };
    let refs: Vec<Vec<usize>> = dataset.pairs.iter().map(|p| p.target.clone()).collect();
    let bleu = meta_bleu(cb, &hypotheses, &refs)?;
    let matched: Vec<f64> = hypotheses
        .iter()
        .zip(&refs)
        .filter(|(h, r)| h.len() == r.len())
        .map(|(h, r)| unit_accuracy(h, r))
        .collect::<Result<_>>()?;
    let unit_acc = if matched.is_empty() { 0.0 } else { matched.iter().sum::<f64>() / matched.len() as f64 };
    let edit = hypotheses.iter().zip(&refs).map(|(h, r)| levenshtein(h, r) as f64).sum::<f64>() / refs.len() as f64;
    let label = if system == System::Hybrid && !cfg.kmeans_mapping { "hybrid-no-kmeans".to_string() } else { system.to_string() };
    Ok(Evaluation {
        report: MetricsReport {
            system: label,
            steps: cfg.steps,
            meta_bleu: bleu,
            unit_acc,
            edit,
            wall_ms: start.elapsed().as_millis() as u64,
            seed,
        },
        hypotheses,
        traces,
    })
}

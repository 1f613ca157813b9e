//! Conditional denoisers `p(x0 | x_t, t, source)`.
//!
//! Decoder vocabularies are laid out as `[0, K)` real units, `K` the mask
//! token and `K + 1` the pad token.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{invalid, Result};

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod train;

pub use model::{DenoiserConfig, Transformer};
pub use train::{train, TrainConfig, TrainReport};

pub fn mask_id(num_units: usize) -> usize {
    num_units
}

pub fn pad_id(num_units: usize) -> usize {
    num_units + 1
}

/// A model producing per-position logits over its vocabulary.
///
/// Inputs are always discrete unit ids; the source is encoded once into a
/// context that every reverse step reuses.
pub trait Denoiser: Sync {
    type Context: Sync;

    /// Number of real units `K` (the first `K` logit columns).
    fn num_units(&self) -> usize;

    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    fn encode(&self, source: &[usize]) -> Result<Self::Context>;

    /// Logits of shape `x_t.len() × vocab_size`.
    fn logits(&self, ctx: &Self::Context, x_t: &[usize], t: usize) -> Result<Array2<f64>>;

    /// Logits over target lengths; entry `i` scores length `i + 1`.
    fn length_logits(&self, ctx: &Self::Context) -> Array1<f64>;

    fn forward(&self, x_t: &[usize], t: usize, source: &[usize]) -> Result<Array2<f64>> {
        let ctx = self.encode(source)?;
        self.logits(&ctx, x_t, t)
    }
}

/// Per-position argmax over the real units only; ties go to the lowest id.
pub fn argmax_units(logits: ArrayView2<'_, f64>, num_units: usize) -> Vec<usize> {
    logits.outer_iter().map(|row| argmax(row.slice(ndarray::s![..num_units]))).collect()
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_x0<D: Denoiser>(d: &D, x_t: &[usize], t: usize, source: &[usize]) -> Result<Vec<usize>> {
    Ok(argmax_units(d.forward(x_t, t, source)?.view(), d.num_units()))
}

/// The `beam` highest-scoring lengths, best first (ties to the shorter length).
pub fn top_lengths(length_logits: ArrayView1<'_, f64>, beam: usize) -> Result<Vec<usize>> {
    if beam == 0 {
        return invalid("beam must be >= 1");
    }
    let mut order: Vec<usize> = (0..length_logits.len()).collect();
    order.sort_by(|&a, &b| length_logits[b].total_cmp(&length_logits[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(beam).map(|i| i + 1).collect())
}

pub fn predict_length<D: Denoiser>(d: &D, source: &[usize], beam: usize) -> Result<Vec<usize>> {
    let ctx = d.encode(source)?;
    top_lengths(d.length_logits(&ctx).view(), beam)
}

/// Mean negative log-probability of `candidate` under `logits`.
pub fn sequence_nll(candidate: &[usize], logits: ArrayView2<'_, f64>) -> Result<f64> {
    if candidate.len() != logits.nrows() || candidate.is_empty() {
        return invalid(format!("candidate length {} vs {} logit rows", candidate.len(), logits.nrows()));
    }
    if let Some(&u) = candidate.iter().find(|&&u| u >= logits.ncols()) {
        return invalid(format!("token {u} outside vocabulary"));
    }
    let total: f64 = candidate
        .iter()
        .zip(logits.outer_iter())
        .map(|(&u, row)| -nn::log_softmax(row)[u])
        .sum();
    Ok(total / candidate.len() as f64)
}

/// Logit value used for "impossible" entries of oracle outputs.
const ORACLE_LOW: f64 = -1e9;

/// A denoiser that knows the reference target of every source it was built
/// with and returns one-hot logits for it, regardless of `x_t` and `t`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    num_units: usize,
    max_len: usize,
    table: HashMap<Vec<usize>, Vec<usize>>,
}

impl OracleDenoiser {
    pub fn new<'a>(num_units: usize, max_len: usize, pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Self {
        let table = pairs.into_iter().map(|(s, t)| (s.to_vec(), t.to_vec())).collect();
        Self { num_units, max_len, table }
    }
}

impl Denoiser for OracleDenoiser {
    type Context = Vec<usize>;

    fn num_units(&self) -> usize {
        self.num_units
    }

    fn vocab_size(&self) -> usize {
        self.num_units + 2
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, source: &[usize]) -> Result<Vec<usize>> {
        match self.table.get(source) {
            Some(t) => Ok(t.clone()),
            None => invalid("oracle has no reference for this source"),
        }
    }

    /// At a wrong length the logits are flat, so length-beam scoring
    /// prefers the true length.
    fn logits(&self, target: &Vec<usize>, x_t: &[usize], _t: usize) -> Result<Array2<f64>> {
        if x_t.len() != target.len() {
            return Ok(Array2::zeros((x_t.len(), self.vocab_size())));
        }
        let mut out = Array2::from_elem((x_t.len(), self.vocab_size()), ORACLE_LOW);
        for (i, &u) in target.iter().enumerate() {
            out[[i, u]] = 0.0;
        }
        Ok(out)
    }

    fn length_logits(&self, target: &Vec<usize>) -> Array1<f64> {
        let mut out = Array1::from_elem(self.max_len, ORACLE_LOW);
        out[target.len() - 1] = 0.0;
        out
    }
}

/// Emits all-zero logits over a vocabulary of `vocab` entries.
#[derive(Debug, Clone)]
pub struct UniformDenoiser {
    pub num_units: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Denoiser for UniformDenoiser {
    type Context = ();

    fn num_units(&self) -> usize {
        self.num_units
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, _source: &[usize]) -> Result<()> {
        Ok(())
    }

    fn logits(&self, _ctx: &(), x_t: &[usize], _t: usize) -> Result<Array2<f64>> {
        Ok(Array2::zeros((x_t.len(), self.vocab)))
    }

    fn length_logits(&self, _ctx: &()) -> Array1<f64> {
        Array1::zeros(self.max_len)
    }
}

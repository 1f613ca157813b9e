//! Layers with hand-written backward passes.
//!
//! Parameters live in one flat `f64` buffer described by a [`Layout`];
//! gradients use a second buffer with the same layout. Each layer's
//! `forward` returns its output together with a cache that `backward`
//! consumes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Ordered description of every parameter tensor in a flat buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
}

pub type ParamId = usize;

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.specs.push(ParamSpec { name: name.into(), rows, cols, offset: self.total });
        self.total += rows * cols;
        self.specs.len() - 1
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn view<'a>(&self, data: &'a [f64], id: ParamId) -> ArrayView2<'a, f64> {
        let s = &self.specs[id];
        ArrayView2::from_shape((s.rows, s.cols), &data[s.offset..s.offset + s.rows * s.cols]).expect("layout")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64], id: ParamId) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[id];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.offset..s.offset + s.rows * s.cols])
            .expect("layout")
    }

    /// Name of the tensor owning flat index `i`.
    pub fn owner(&self, i: usize) -> &ParamSpec {
        let pos = self.specs.partition_point(|s| s.offset <= i);
        &self.specs[pos - 1]
    }
}

/// `a · b` into a fresh array.
pub(crate) fn matmul(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(b)
}

/// `acc += aᵀ · b`.
fn add_at_b(acc: &mut ArrayViewMut2<'_, f64>, a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

fn add_row_sums(acc: &mut ArrayViewMut2<'_, f64>, dy: &ArrayView2<'_, f64>) {
    let sums = dy.sum_axis(Axis(0));
    acc.row_mut(0).scaled_add(1.0, &sums);
}

/// Standard sinusoidal encoding of `pos` into `dim` features.
pub fn sinusoid(pos: f64, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |j| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

pub fn positions(n: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        out.row_mut(i).assign(&sinusoid(i as f64, dim));
    }
    out
}

pub fn init_normal(layout: &Layout, data: &mut [f64], id: ParamId, std: f64, rng: &mut Rng) {
    for v in layout.view_mut(data, id).iter_mut() {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
}

pub fn init_const(layout: &Layout, data: &mut [f64], id: ParamId, value: f64) {
    layout.view_mut(data, id).fill(value);
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, inp: usize, out: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), inp, out);
        let b = layout.add(format!("{name}.bias"), 1, out);
        Self { w, b }
    }

    pub fn init(&self, layout: &Layout, data: &mut [f64], rng: &mut Rng) {
        let s = &layout.specs()[self.w];
        let std = (2.0 / (s.rows + s.cols) as f64).sqrt();
        init_normal(layout, data, self.w, std, rng);
        init_const(layout, data, self.b, 0.0);
    }

    pub fn forward(&self, layout: &Layout, p: &[f64], x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = matmul(x, &layout.view(p, self.w));
        y += &layout.view(p, self.b).row(0);
        y
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        layout: &Layout,
        p: &[f64],
        g: &mut [f64],
        x: &ArrayView2<'_, f64>,
        dy: &ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        add_at_b(&mut layout.view_mut(g, self.w), x, dy);
        add_row_sums(&mut layout.view_mut(g, self.b), dy);
        matmul(dy, &layout.view(p, self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        let gain = layout.add(format!("{name}.gain"), 1, dim);
        let bias = layout.add(format!("{name}.bias"), 1, dim);
        Self { gain, bias }
    }

    pub fn init(&self, layout: &Layout, data: &mut [f64]) {
        init_const(layout, data, self.gain, 1.0);
        init_const(layout, data, self.bias, 0.0);
    }

    pub fn forward(&self, layout: &Layout, p: &[f64], x: &ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
        }
        let gain = layout.view(p, self.gain);
        let bias = layout.view(p, self.bias);
        let y = &xhat * &gain.row(0) + &bias.row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        layout: &Layout,
        p: &[f64],
        g: &mut [f64],
        cache: &LayerNormCache,
        dy: &ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let (n, d) = dy.dim();
        layout.view_mut(g, self.gain).row_mut(0).scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
        add_row_sums(&mut layout.view_mut(g, self.bias), dy);
        let dxhat = dy * &layout.view(p, self.gain).row(0);
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum_dh = dh.sum();
            let sum_dh_xh = dh.dot(&xh);
            let scale = cache.inv_std[i] / d as f64;
            for j in 0..d {
                dx[[i, j]] = scale * (d as f64 * dh[j] - sum_dh - xh[j] * sum_dh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(layout, &format!("{name}.up"), dim, hidden),
            down: Linear::new(layout, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn init(&self, layout: &Layout, data: &mut [f64], rng: &mut Rng) {
        self.up.init(layout, data, rng);
        self.down.init(layout, data, rng);
    }

    pub fn forward(&self, layout: &Layout, p: &[f64], x: Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.forward(layout, p, &x.view());
        let act = pre.mapv(gelu);
        let y = self.down.forward(layout, p, &act.view());
        (y, FeedForwardCache { x, pre, act })
    }

    pub fn backward(
        &self,
        layout: &Layout,
        p: &[f64],
        g: &mut [f64],
        cache: &FeedForwardCache,
        dy: &ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let dact = self.down.backward(layout, p, g, &cache.act.view(), dy);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.up.backward(layout, p, g, &cache.x.view(), &dpre.view())
    }
}

/// Multi-head attention without masking; every query sees every key.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

impl Attention {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(layout, &format!("{name}.q"), dim, dim),
            k: Linear::new(layout, &format!("{name}.k"), dim, dim),
            v: Linear::new(layout, &format!("{name}.v"), dim, dim),
            o: Linear::new(layout, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn init(&self, layout: &Layout, data: &mut [f64], rng: &mut Rng) {
        for lin in [self.q, self.k, self.v, self.o] {
            lin.init(layout, data, rng);
        }
    }

    pub fn forward(
        &self,
        layout: &Layout,
        p: &[f64],
        xq: Array2<f64>,
        xkv: Array2<f64>,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.q.forward(layout, p, &xq.view());
        let k = self.k.forward(layout, p, &xkv.view());
        let v = self.v.forward(layout, p, &xkv.view());
        let (n, dim) = q.dim();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = Array2::zeros((n, dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = matmul(&q.slice(cols), &k.slice(cols).t());
            scores *= scale;
            softmax_rows(&mut scores);
            general_mat_mul(1.0, &scores, &v.slice(cols), 0.0, &mut mixed.slice_mut(cols));
            probs.push(scores);
        }
        let out = self.o.forward(layout, p, &mixed.view());
        (out, AttentionCache { xq, xkv, q, k, v, probs, mixed })
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(
        &self,
        layout: &Layout,
        p: &[f64],
        g: &mut [f64],
        c: &AttentionCache,
        dy: &ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dmixed = self.o.backward(layout, p, g, &c.mixed.view(), dy);
        let (n, dim) = c.q.dim();
        let m = c.k.nrows();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros((n, dim));
        let mut dk = Array2::zeros((m, dim));
        let mut dv = Array2::zeros((m, dim));
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let a = &c.probs[h];
            let dmh = dmixed.slice(cols);
            let da = matmul(&dmh, &c.v.slice(cols).t());
            general_mat_mul(1.0, &a.t(), &dmh, 0.0, &mut dv.slice_mut(cols));
            let mut ds = &da * a;
            for (mut row, arow) in ds.outer_iter_mut().zip(a.outer_iter()) {
                let total = row.sum();
                row.scaled_add(-total, &arow);
            }
            general_mat_mul(scale, &ds, &c.k.slice(cols), 0.0, &mut dq.slice_mut(cols));
            general_mat_mul(scale, &ds.t(), &c.q.slice(cols), 0.0, &mut dk.slice_mut(cols));
        }
        let dxq = self.q.backward(layout, p, g, &c.xq.view(), &dq.view());
        let mut dxkv = self.k.backward(layout, p, g, &c.xkv.view(), &dk.view());
        dxkv += &self.v.backward(layout, p, g, &c.xkv.view(), &dv.view());
        (dxq, dxkv)
    }
}

pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

pub fn log_softmax(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Inverted dropout mask; `None` when dropout is disabled.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: Option<&mut Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep }))
}

pub fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

//! Encoder-decoder denoiser with a bidirectional decoder, an additive
//! diffusion-time embedding and a length-prediction head.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::nn::{
    apply_mask, dropout_mask, init_normal, positions, sinusoid, Attention, AttentionCache, FeedForward,
    FeedForwardCache, LayerNorm, LayerNormCache, Layout, Linear, ParamId,
};
use super::Denoiser;
use crate::error::{invalid, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Number of real units `K`; the decoder vocabulary is `K + 2`
    /// (units, mask, pad).
    pub num_units: usize,
    pub source_vocab: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl DenoiserConfig {
    /// Desk-scale defaults for a codebook with `num_units` units.
    pub fn desk(num_units: usize, source_vocab: usize) -> Self {
        Self {
            num_units,
            source_vocab,
            embed_dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            max_len: 64,
            dropout: 0.1,
        }
    }

    /// Reference-scale architecture (12 encoder / 6 decoder layers, width 512).
    pub fn paper_scale(num_units: usize, source_vocab: usize) -> Self {
        Self {
            num_units,
            source_vocab,
            embed_dim: 512,
            heads: 8,
            enc_layers: 12,
            dec_layers: 6,
            ffn_dim: 2048,
            max_len: 1024,
            dropout: 0.1,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.num_units + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_units == 0 || self.source_vocab == 0 || self.embed_dim == 0 || self.max_len == 0 {
            return invalid("denoiser sizes must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return invalid(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Architecture {
    src_embed: ParamId,
    tgt_embed: ParamId,
    time_proj: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out: Linear,
    length_head: Linear,
}

impl Architecture {
    fn build(cfg: &DenoiserConfig, layout: &mut Layout) -> Self {
        let e = cfg.embed_dim;
        let src_embed = layout.add("src_embed", cfg.source_vocab, e);
        let tgt_embed = layout.add("tgt_embed", cfg.vocab_size(), e);
        let time_proj = Linear::new(layout, "time_proj", e, e);
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer {
                ln1: LayerNorm::new(layout, &format!("enc{i}.ln1"), e),
                attn: Attention::new(layout, &format!("enc{i}.attn"), e, cfg.heads),
                ln2: LayerNorm::new(layout, &format!("enc{i}.ln2"), e),
                ffn: FeedForward::new(layout, &format!("enc{i}.ffn"), e, cfg.ffn_dim),
            })
            .collect();
        let enc_norm = LayerNorm::new(layout, "enc_norm", e);
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer {
                ln1: LayerNorm::new(layout, &format!("dec{i}.ln1"), e),
                self_attn: Attention::new(layout, &format!("dec{i}.self_attn"), e, cfg.heads),
                ln2: LayerNorm::new(layout, &format!("dec{i}.ln2"), e),
                cross_attn: Attention::new(layout, &format!("dec{i}.cross_attn"), e, cfg.heads),
                ln3: LayerNorm::new(layout, &format!("dec{i}.ln3"), e),
                ffn: FeedForward::new(layout, &format!("dec{i}.ffn"), e, cfg.ffn_dim),
            })
            .collect();
        let dec_norm = LayerNorm::new(layout, "dec_norm", e);
        let out = Linear::new(layout, "out", e, cfg.vocab_size());
        let length_head = Linear::new(layout, "length_head", e, cfg.max_len);
        Self { src_embed, tgt_embed, time_proj, encoder, enc_norm, decoder, dec_norm, out, length_head }
    }
}

/// The trainable conditional denoiser `p(x0 | x_t, t, source)`.
#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: DenoiserConfig,
    layout: Layout,
    arch: Architecture,
    params: Vec<f64>,
}

/// Encoder output for one source sequence.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    memory: Array2<f64>,
}

struct EncLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    ffn: FeedForwardCache,
    drop2: Option<Array2<f64>>,
}

struct DecLayerCache {
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    cross_attn: AttentionCache,
    drop2: Option<Array2<f64>>,
    ln3: LayerNormCache,
    ffn: FeedForwardCache,
    drop3: Option<Array2<f64>>,
}

/// Everything the backward pass needs for one (source, x_t, t) example.
pub struct ExampleTape {
    source: Vec<usize>,
    x_t: Vec<usize>,
    time_feat: Array2<f64>,
    enc_drop: Option<Array2<f64>>,
    enc: Vec<EncLayerCache>,
    enc_norm: LayerNormCache,
    memory: Array2<f64>,
    dec_drop: Option<Array2<f64>>,
    dec: Vec<DecLayerCache>,
    dec_norm: LayerNormCache,
    dec_final: Array2<f64>,
    pooled: Array2<f64>,
}

/// Output of a full forward pass over one example.
pub struct ExampleOutput {
    pub logits: Array2<f64>,
    pub length_logits: Array1<f64>,
    pub tape: ExampleTape,
}

impl Transformer {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::default();
        let arch = Architecture::build(&cfg, &mut layout);
        let mut params = vec![0.0; layout.len()];
        let mut rng = seed::rng_for(seed, "denoiser-init");
        let l = &layout;
        init_normal(l, &mut params, arch.src_embed, 1.0, &mut rng);
        init_normal(l, &mut params, arch.tgt_embed, 1.0, &mut rng);
        arch.time_proj.init(l, &mut params, &mut rng);
        for layer in &arch.encoder {
            layer.ln1.init(l, &mut params);
            layer.attn.init(l, &mut params, &mut rng);
            layer.ln2.init(l, &mut params);
            layer.ffn.init(l, &mut params, &mut rng);
        }
        arch.enc_norm.init(l, &mut params);
        for layer in &arch.decoder {
            layer.ln1.init(l, &mut params);
            layer.self_attn.init(l, &mut params, &mut rng);
            layer.ln2.init(l, &mut params);
            layer.cross_attn.init(l, &mut params, &mut rng);
            layer.ln3.init(l, &mut params);
            layer.ffn.init(l, &mut params, &mut rng);
        }
        arch.dec_norm.init(l, &mut params);
        arch.out.init(l, &mut params, &mut rng);
        arch.length_head.init(l, &mut params, &mut rng);
        Ok(Self { cfg, layout, arch, params })
    }

    /// Rebuilds a model from a config and a flat parameter vector in layout order.
    pub fn from_parts(cfg: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return invalid(format!("expected {} parameters, got {}", model.params.len(), params.len()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return invalid("parameters must be finite");
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, source: &[usize], x_t: &[usize]) -> Result<()> {
        if source.is_empty() || x_t.is_empty() {
            return invalid("source and x_t must be non-empty");
        }
        if source.len() > self.cfg.max_len || x_t.len() > self.cfg.max_len {
            return invalid(format!("sequence longer than max_len = {}", self.cfg.max_len));
        }
        if let Some(s) = source.iter().find(|&&s| s >= self.cfg.source_vocab) {
            return invalid(format!("source symbol {s} out of range"));
        }
        if let Some(u) = x_t.iter().find(|&&u| u >= self.cfg.vocab_size()) {
            return invalid(format!("decoder token {u} out of range"));
        }
        Ok(())
    }

    fn encode_tape(&self, source: &[usize], mut rng: Option<&mut Rng>) -> (Array2<f64>, Option<Array2<f64>>, Vec<EncLayerCache>, LayerNormCache) {
        let (l, p, a) = (&self.layout, &self.params[..], &self.arch);
        let e = self.cfg.embed_dim;
        let emb = l.view(p, a.src_embed);
        let mut x = emb.select(Axis(0), source) + &positions(source.len(), e);
        let enc_drop = dropout_mask(x.dim(), self.cfg.dropout, rng.as_deref_mut());
        apply_mask(&mut x, &enc_drop);
        let mut caches = Vec::with_capacity(a.encoder.len());
        for layer in &a.encoder {
            let (h, ln1) = layer.ln1.forward(l, p, &x.view());
            let (mut att, attn) = layer.attn.forward(l, p, h.clone(), h);
            let drop1 = dropout_mask(att.dim(), self.cfg.dropout, rng.as_deref_mut());
            apply_mask(&mut att, &drop1);
            x += &att;
            let (h, ln2) = layer.ln2.forward(l, p, &x.view());
            let (mut f, ffn) = layer.ffn.forward(l, p, h);
            let drop2 = dropout_mask(f.dim(), self.cfg.dropout, rng.as_deref_mut());
            apply_mask(&mut f, &drop2);
            x += &f;
            caches.push(EncLayerCache { ln1, attn, drop1, ln2, ffn, drop2 });
        }
        let (memory, enc_norm) = a.enc_norm.forward(l, p, &x.view());
        (memory, enc_drop, caches, enc_norm)
    }

    fn time_features(&self, t: usize) -> Array2<f64> {
        sinusoid(t as f64, self.cfg.embed_dim).insert_axis(Axis(0))
    }

    /// Full forward pass keeping every intermediate needed for `backward`.
    /// Passing a generator enables dropout.
    pub fn forward_tape(
        &self,
        source: &[usize],
        x_t: &[usize],
        t: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<ExampleOutput> {
        self.check_inputs(source, x_t)?;
        let (l, p, a) = (&self.layout, &self.params[..], &self.arch);
        let e = self.cfg.embed_dim;
        let (memory, enc_drop, enc, enc_norm) = self.encode_tape(source, rng.as_deref_mut());
        let pooled = memory.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let length_logits = a.length_head.forward(l, p, &pooled.view()).row(0).to_owned();

        let time_feat = self.time_features(t);
        let time_emb = a.time_proj.forward(l, p, &time_feat.view());
        let mut y = l.view(p, a.tgt_embed).select(Axis(0), x_t) + &positions(x_t.len(), e);
        y += &time_emb.row(0);
        let dec_drop = dropout_mask(y.dim(), self.cfg.dropout, rng.as_deref_mut());
        apply_mask(&mut y, &dec_drop);
        let mut dec = Vec::with_capacity(a.decoder.len());
        for layer in &a.decoder {
            let (h, ln1) = layer.ln1.forward(l, p, &y.view());
            let (mut sa, self_attn) = layer.self_attn.forward(l, p, h.clone(), h);
            let drop1 = dropout_mask(sa.dim(), self.cfg.dropout, rng.as_deref_mut());
            apply_mask(&mut sa, &drop1);
            y += &sa;
            let (h, ln2) = layer.ln2.forward(l, p, &y.view());
            let (mut ca, cross_attn) = layer.cross_attn.forward(l, p, h, memory.clone());
            let drop2 = dropout_mask(ca.dim(), self.cfg.dropout, rng.as_deref_mut());
            apply_mask(&mut ca, &drop2);
            y += &ca;
            let (h, ln3) = layer.ln3.forward(l, p, &y.view());
            let (mut f, ffn) = layer.ffn.forward(l, p, h);
            let drop3 = dropout_mask(f.dim(), self.cfg.dropout, rng.as_deref_mut());
            apply_mask(&mut f, &drop3);
            y += &f;
            dec.push(DecLayerCache { ln1, self_attn, drop1, ln2, cross_attn, drop2, ln3, ffn, drop3 });
        }
        let (dec_final, dec_norm) = a.dec_norm.forward(l, p, &y.view());
        let logits = a.out.forward(l, p, &dec_final.view());
        let tape = ExampleTape {
            source: source.to_vec(),
            x_t: x_t.to_vec(),
            time_feat,
            enc_drop,
            enc,
            enc_norm,
            memory,
            dec_drop,
            dec,
            dec_norm,
            dec_final,
            pooled,
        };
        Ok(ExampleOutput { logits, length_logits, tape })
    }

    /// Accumulates parameter gradients into `grads` (same layout as the
    /// parameters) given the loss gradients w.r.t. the logits.
    pub fn backward(&self, tape: &ExampleTape, dlogits: &Array2<f64>, dlength: &Array1<f64>, grads: &mut [f64]) {
        let (l, p, a) = (&self.layout, &self.params[..], &self.arch);
        let mask = |d: Array2<f64>, m: &Option<Array2<f64>>| match m {
            Some(m) => d * m,
            None => d,
        };

        let dfinal = a.out.backward(l, p, grads, &tape.dec_final.view(), &dlogits.view());
        let mut dy = a.dec_norm.backward(l, p, grads, &tape.dec_norm, &dfinal.view());
        let mut dmemory = Array2::<f64>::zeros(tape.memory.dim());
        for (layer, c) in a.decoder.iter().zip(&tape.dec).rev() {
            let df = mask(dy.clone(), &c.drop3);
            let dh = layer.ffn.backward(l, p, grads, &c.ffn, &df.view());
            dy += &layer.ln3.backward(l, p, grads, &c.ln3, &dh.view());
            let dca = mask(dy.clone(), &c.drop2);
            let (dh, dmem) = layer.cross_attn.backward(l, p, grads, &c.cross_attn, &dca.view());
            dmemory += &dmem;
            dy += &layer.ln2.backward(l, p, grads, &c.ln2, &dh.view());
            let dsa = mask(dy.clone(), &c.drop1);
            let (dq, dkv) = layer.self_attn.backward(l, p, grads, &c.self_attn, &dsa.view());
            let dh = dq + dkv;
            dy += &layer.ln1.backward(l, p, grads, &c.ln1, &dh.view());
        }
        let dy = mask(dy, &tape.dec_drop);
        {
            let mut g = l.view_mut(grads, a.tgt_embed);
            for (i, &tok) in tape.x_t.iter().enumerate() {
                g.row_mut(tok).scaled_add(1.0, &dy.row(i));
            }
        }
        let dtime = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        a.time_proj.backward(l, p, grads, &tape.time_feat.view(), &dtime.view());

        let dl = dlength.view().insert_axis(Axis(0));
        let dpooled = a.length_head.backward(l, p, grads, &tape.pooled.view(), &dl);
        let n_src = tape.memory.nrows() as f64;
        dmemory += &(&dpooled.row(0) / n_src);

        let mut dx = a.enc_norm.backward(l, p, grads, &tape.enc_norm, &dmemory.view());
        for (layer, c) in a.encoder.iter().zip(&tape.enc).rev() {
            let df = mask(dx.clone(), &c.drop2);
            let dh = layer.ffn.backward(l, p, grads, &c.ffn, &df.view());
            dx += &layer.ln2.backward(l, p, grads, &c.ln2, &dh.view());
            let da = mask(dx.clone(), &c.drop1);
            let (dq, dkv) = layer.attn.backward(l, p, grads, &c.attn, &da.view());
            let dh = dq + dkv;
            dx += &layer.ln1.backward(l, p, grads, &c.ln1, &dh.view());
        }
        let dx = mask(dx, &tape.enc_drop);
        let mut g = l.view_mut(grads, a.src_embed);
        for (i, &s) in tape.source.iter().enumerate() {
            g.row_mut(s).scaled_add(1.0, &dx.row(i));
        }
    }

    fn decode_logits(&self, memory: &Array2<f64>, x_t: &[usize], t: usize) -> Array2<f64> {
        let (l, p, a) = (&self.layout, &self.params[..], &self.arch);
        let e = self.cfg.embed_dim;
        let time_emb = a.time_proj.forward(l, p, &self.time_features(t).view());
        let mut y = l.view(p, a.tgt_embed).select(Axis(0), x_t) + &positions(x_t.len(), e);
        y += &time_emb.row(0);
        for layer in &a.decoder {
            let (h, _) = layer.ln1.forward(l, p, &y.view());
            let (sa, _) = layer.self_attn.forward(l, p, h.clone(), h);
            y += &sa;
            let (h, _) = layer.ln2.forward(l, p, &y.view());
            let (ca, _) = layer.cross_attn.forward(l, p, h, memory.clone());
            y += &ca;
            let (h, _) = layer.ln3.forward(l, p, &y.view());
            let (f, _) = layer.ffn.forward(l, p, h);
            y += &f;
        }
        let (fin, _) = a.dec_norm.forward(l, p, &y.view());
        a.out.forward(l, p, &fin.view())
    }
}

impl Denoiser for Transformer {
    type Context = EncodedSource;

    fn num_units(&self) -> usize {
        self.cfg.num_units
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn encode(&self, source: &[usize]) -> Result<EncodedSource> {
        self.check_inputs(source, &[0])?;
        let (memory, ..) = self.encode_tape(source, None);
        Ok(EncodedSource { memory })
    }

    fn logits(&self, ctx: &EncodedSource, x_t: &[usize], t: usize) -> Result<Array2<f64>> {
        self.check_inputs(&[0], x_t)?;
        if t == 0 {
            return invalid("timestep must be >= 1");
        }
        Ok(self.decode_logits(&ctx.memory, x_t, t))
    }

    fn length_logits(&self, ctx: &EncodedSource) -> Array1<f64> {
        let (l, p, a) = (&self.layout, &self.params[..], &self.arch);
        let pooled = ctx.memory.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        a.length_head.forward(l, p, &pooled.view()).row(0).to_owned()
    }
}

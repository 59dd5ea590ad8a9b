//! Transformer building blocks shared by the tokenizer and the next-scale
//! generator: linear/MLP/attention layers recorded on the tape for training,
//! plus an incremental (KV-cached) forward path for generation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels;
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::{randn_tensor, ParamId, ParamStore, Tensor};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), randn_tensor(rng, vec![d_in, d_out], INIT_STD));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Direct (tape-free) forward over a row-major `rows x d_in` buffer.
    pub fn forward_raw(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; rows * self.d_out];
        for r in 0..rows {
            out[r * self.d_out..(r + 1) * self.d_out].copy_from_slice(store.values(self.b));
        }
        kernels::matmul_nn(x, store.values(self.w), &mut out, rows, self.d_in, self.d_out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]));
        LayerNormParams { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn forward_raw(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let d = store.values(self.gain).len();
        let gain = store.values(self.gain);
        let bias = store.values(self.bias);
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let (mean, var) = kernels::row_mean_var(row);
            let inv = 1.0 / (var + crate::autodiff::tape::LAYER_NORM_EPS).sqrt();
            let o = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                o[c] = (row[c] - mean) * inv * gain[c] + bias[c];
            }
        }
        out
    }
}

pub fn layer_norm_plain_raw(x: &[f32], rows: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let (mean, var) = kernels::row_mean_var(row);
        let inv = 1.0 / (var + crate::autodiff::tape::LAYER_NORM_EPS).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            o[c] = (row[c] - mean) * inv;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn forward_raw(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let mut h = self.fc1.forward_raw(store, x, rows);
        for v in h.iter_mut() {
            *v = kernels::gelu(*v);
        }
        self.fc2.forward_raw(store, &h, rows)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        assert!(d % heads == 0, "model width must divide into heads");
        Attention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d),
            heads,
            d,
        }
    }

    /// Full-sequence attention; `mask_bias`, when given, is an additive
    /// T x T node (0 where attention is allowed, a large negative value
    /// where it is not).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mask_bias: Option<NodeId>,
    ) -> NodeId {
        let dh = self.d / self.heads;
        let q = self.wq.forward(tape, store, x);
        let k = self.wk.forward(tape, store, x);
        let v = self.wv.forward(tape, store, x);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask_bias {
                scores = tape.add(scores, m);
            }
            let attn = tape.softmax_rows(scores);
            head_outs.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(&head_outs);
        self.wo.forward(tape, store, concat)
    }
}

/// Standard pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNormParams,
    pub attn: Attention,
    pub ln2: LayerNormParams,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, hidden),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mask_bias: Option<NodeId>,
    ) -> NodeId {
        let n = self.ln1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, n, mask_bias);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, store, x);
        let m = self.mlp.forward(tape, store, n);
        tape.add(x, m)
    }
}

/// Per-scale refinement block: 1-D convolution plus a two-layer perceptron,
/// with a residual connection around the whole block.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub mlp: Mlp,
    pub kernel: usize,
    pub d: usize,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.conv.w"),
            randn_tensor(rng, vec![d, d, kernel], INIT_STD),
        );
        let b = store.add(format!("{name}.conv.b"), Tensor::zeros(vec![d]));
        ConvBlock {
            w,
            b,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, hidden),
            kernel,
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let c = tape.conv1d(x, w, b, self.kernel);
        let c = tape.gelu(c);
        let m = self.mlp.forward(tape, store, c);
        tape.add(x, m)
    }

    pub fn forward_raw(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let d = self.d;
        let w = store.values(self.w);
        let bias = store.values(self.b);
        let mut conv = vec![0.0f32; rows * d];
        for r in 0..rows {
            conv[r * d..(r + 1) * d].copy_from_slice(bias);
        }
        let pad = self.kernel / 2;
        for j in 0..self.kernel {
            let mut wj = vec![0.0f32; d * d];
            for o in 0..d {
                for i in 0..d {
                    wj[o * d + i] = w[o * d * self.kernel + i * self.kernel + j];
                }
            }
            let lo = pad.saturating_sub(j);
            let hi = (rows + pad - j).min(rows);
            if lo >= hi {
                continue;
            }
            let s_lo = (lo + j) - pad;
            kernels::matmul_nt(
                &x[s_lo * d..(s_lo + (hi - lo)) * d],
                &wj,
                &mut conv[lo * d..hi * d],
                hi - lo,
                d,
                d,
            );
        }
        for v in conv.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let m = self.mlp.forward_raw(store, &conv, rows);
        let mut out = x.to_vec();
        for (o, mv) in out.iter_mut().zip(m.iter()) {
            *o += mv;
        }
        out
    }
}

// ── Incremental inference ────────────────────────────────────────────

/// Per-layer key/value history for cached generation.
#[derive(Debug, Clone, Default)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub len: usize,
}

/// Attention extension: the new rows attend to everything already cached
/// plus every new row (full visibility within the extension). Appends the
/// new keys/values to the cache and returns the attention output.
pub fn attend_extend(
    attn: &Attention,
    store: &ParamStore,
    cache: &mut LayerKv,
    x_new: &[f32],
    n_new: usize,
) -> Vec<f32> {
    let d = attn.d;
    let dh = d / attn.heads;
    let q = attn.wq.forward_raw(store, x_new, n_new);
    let k_new = attn.wk.forward_raw(store, x_new, n_new);
    let v_new = attn.wv.forward_raw(store, x_new, n_new);
    cache.k.extend_from_slice(&k_new);
    cache.v.extend_from_slice(&v_new);
    cache.len += n_new;

    let total = cache.len;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut concat = vec![0.0f32; n_new * d];
    let mut scores = vec![0.0f32; total];
    let mut probs = vec![0.0f32; total];
    for h in 0..attn.heads {
        for r in 0..n_new {
            let q_row = &q[r * d + h * dh..r * d + (h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let k_row = &cache.k[j * d + h * dh..j * d + (h + 1) * dh];
                *s = kernels::dot(q_row, k_row) * scale;
            }
            kernels::softmax_row(&scores, &mut probs);
            let out = &mut concat[r * d + h * dh..r * d + (h + 1) * dh];
            out.fill(0.0);
            for (j, &p) in probs.iter().enumerate() {
                let v_row = &cache.v[j * d + h * dh..j * d + (h + 1) * dh];
                kernels::axpy(p, v_row, out);
            }
        }
    }
    attn.wo.forward_raw(store, &concat, n_new)
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Draw from softmax(logits / temperature); a non-positive temperature means
/// a deterministic argmax.
pub fn sample_with_temperature(
    logits: &[f32],
    temperature: f32,
    rng: &mut ChaCha8Rng,
) -> usize {
    use rand::Rng;
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut weights = vec![0.0f64; logits.len()];
    let mut total = 0.0f64;
    for (w, &v) in weights.iter_mut().zip(logits.iter()) {
        *w = (((v - max) / temperature) as f64).exp();
        total += *w;
    }
    let mut u: f64 = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    logits.len() - 1
}

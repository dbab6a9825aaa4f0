//! Network building blocks on top of the autodiff graph.
//!
//! All blocks are pre-norm with residual connections. Layers register their
//! parameters in a [`ParamStore`] at construction under a dotted name prefix
//! and hold only [`ParamId`]s, so the same layer object can run forward
//! passes on any graph borrowing that store.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{normal_init, xavier, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), xavier(rng, d_in, d_out), true);
        let b = ps.add(&format!("{name}.b"), Array2::zeros((1, d_out)), true);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = ps.add(&format!("{name}.gain"), Array2::ones((1, d)), true);
        let bias = ps.add(&format!("{name}.bias"), Array2::zeros((1, d)), true);
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.normalize_rows(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let h = g.mul_row(n, gain);
        g.add_row(h, bias)
    }
}

/// Two-layer MLP with GELU.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp2 {
            l1: Linear::new(ps, rng, &format!("{name}.l1"), d_in, d_hidden),
            l2: Linear::new(ps, rng, &format!("{name}.l2"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }
}

/// Multi-head attention; key/value input may have a different width than the
/// query stream (`d_kv`).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(d_model % heads, 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.q"), d_model, d_model),
            wk: Linear::new(ps, rng, &format!("{name}.k"), d_kv, d_model),
            wv: Linear::new(ps, rng, &format!("{name}.v"), d_kv, d_model),
            wo: Linear::new(ps, rng, &format!("{name}.o"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// `x` (L, d_model) attends over `memory` (M, d_kv).
    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId) -> NodeId {
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, memory);
        let v = self.wv.forward(g, memory);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_tb(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            head_outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&head_outs);
        self.wo.forward(g, cat)
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Debug, Clone)]
pub struct SelfAttnBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp2,
}

impl SelfAttnBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
    ) -> Self {
        SelfAttnBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d, d, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ff: Mlp2::new(ps, rng, &format!("{name}.ff"), d, d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward(g, n, n);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}

/// Pre-norm cross-attention + feed-forward block.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp2,
}

impl CrossAttnBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        d_kv: usize,
        d_ff: usize,
        heads: usize,
    ) -> Self {
        CrossAttnBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d, d_kv, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ff: Mlp2::new(ps, rng, &format!("{name}.ff"), d, d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId) -> NodeId {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward(g, n, memory);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}

/// Transformer decoder layer: self-attention then cross-attention then FF.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_block: SelfAttnBlock,
    pub cross: CrossAttnBlock,
}

impl DecoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        d_kv: usize,
        d_ff: usize,
        heads: usize,
    ) -> Self {
        DecoderLayer {
            self_block: SelfAttnBlock::new(ps, rng, &format!("{name}.self"), d, d_ff, heads),
            cross: CrossAttnBlock::new(ps, rng, &format!("{name}.cross"), d, d_kv, d_ff, heads),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId) -> NodeId {
        let x = self.self_block.forward(g, x);
        self.cross.forward(g, x, memory)
    }
}

/// 1-D temporal convolution layer.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            xavier(rng, kernel * c_in, c_out),
            true,
        );
        let b = ps.add(&format!("{name}.b"), Array2::zeros((1, c_out)), true);
        Conv1dLayer {
            w,
            b,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(x, w, b, self.kernel, self.stride, self.pad)
    }
}

/// Lookup table over integer ids (speakers, words, emotions).
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub n: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        n: usize,
        d: usize,
    ) -> Self {
        let table = ps.add(&format!("{name}.table"), normal_init(rng, n, d, 0.5), true);
        Embedding { table, n }
    }

    /// Returns a (1, d) row for one id.
    pub fn forward(&self, g: &mut Graph, id: usize) -> NodeId {
        let t = g.param(self.table);
        g.gather_rows(t, &[id])
    }
}

/// Sinusoidal positional encoding whose harmonics all complete an integer
/// number of cycles over the clip, so the encoding is periodic in the clip
/// length.
pub fn periodic_positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, d));
    for t in 0..len {
        for i in 0..d / 2 {
            let freq = (i + 1) as f64;
            let phase = 2.0 * std::f64::consts::PI * freq * t as f64 / len as f64;
            pe[[t, 2 * i]] = phase.sin();
            pe[[t, 2 * i + 1]] = phase.cos();
        }
    }
    pe
}

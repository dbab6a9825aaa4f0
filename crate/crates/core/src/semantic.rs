//! Motion-grounded semantic conditioning.
//!
//! Motion-style and emotion embeddings are blended by a learned two-logit
//! softmax gate into a single fused memory vector; per-frame word embeddings
//! query that memory through one pre-norm cross-attention block (memory
//! length 1) and a two-layer output MLP. There is no temporal mixing, so the
//! output is equivariant to frame permutation by construction.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{CrossAttnBlock, Linear, Mlp2};
use crate::nn::params::ParamStore;

/// Per-frame motion-grounded semantic features plus the memory-gate weights.
#[derive(Debug, Clone)]
pub struct SemanticFeature {
    /// (L, cond_dim)
    pub s_m: Array2<f64>,
    /// `(alpha_m, alpha_eps)`, softmax outputs summing to 1.
    pub gate_weights: (f64, f64),
}

pub struct SemanticConditioner {
    pub proj_word: Linear,
    pub proj_style: Linear,
    pub proj_emotion: Linear,
    pub gate: Linear,
    pub xattn: CrossAttnBlock,
    pub out_mlp: Mlp2,
    pub cond_dim: usize,
}

impl SemanticConditioner {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.cond_dim;
        SemanticConditioner {
            proj_word: Linear::new(ps, rng, "mgsc.proj_word", cfg.word_dim, d),
            proj_style: Linear::new(ps, rng, "mgsc.proj_style", cfg.style_dim, d),
            proj_emotion: Linear::new(ps, rng, "mgsc.proj_emotion", cfg.style_dim, d),
            gate: Linear::new(ps, rng, "mgsc.gate", 2 * d, 2),
            xattn: CrossAttnBlock::new(
                ps,
                rng,
                "mgsc.xattn",
                d,
                d,
                ModelConfig::ff_dim(d),
                cfg.heads,
            ),
            out_mlp: Mlp2::new(ps, rng, "mgsc.out", d, d, d),
            cond_dim: d,
        }
    }

    /// Softmax memory gate over the projected style/emotion pair.
    /// Inputs are (1, cond_dim); returns `(alpha (1,2), m (1,cond_dim))`.
    pub fn memory_gate(&self, g: &mut Graph, e_m: NodeId, e_eps: NodeId) -> (NodeId, NodeId) {
        let cat = g.concat_cols(&[e_m, e_eps]);
        let logits = self.gate.forward(g, cat);
        let alpha = g.softmax(logits);
        let a_m = g.slice_cols(alpha, 0, 1);
        let a_e = g.slice_cols(alpha, 1, 2);
        let wm = g.mul_col(e_m, a_m);
        let we = g.mul_col(e_eps, a_e);
        let m = g.add(wm, we);
        (alpha, m)
    }

    /// Cross-attend projected word embeddings over the length-1 memory, then
    /// apply the output MLP. `q` is the projected query (L, cond_dim).
    pub fn condition(&self, g: &mut Graph, q: NodeId, m: NodeId) -> NodeId {
        let h = self.xattn.forward(g, q, m);
        self.out_mlp.forward(g, h)
    }

    /// Full pathway from raw inputs; returns `(S_m node, alpha node)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        e_s: NodeId,
        e_m_raw: NodeId,
        e_eps_raw: NodeId,
    ) -> (NodeId, NodeId) {
        let em = self.proj_style.forward(g, e_m_raw);
        let ee = self.proj_emotion.forward(g, e_eps_raw);
        let (alpha, m) = self.memory_gate(g, em, ee);
        let q = self.proj_word.forward(g, e_s);
        let s_m = self.condition(g, q, m);
        (s_m, alpha)
    }

    /// Value-level convenience used at inference.
    pub fn infer(
        &self,
        ps: &ParamStore,
        e_s: &Array2<f64>,
        e_m: &Array1<f64>,
        e_eps: &Array1<f64>,
    ) -> SemanticFeature {
        let mut g = Graph::new(ps);
        let es = g.input(e_s.clone());
        let em = g.input(e_m.clone().insert_axis(ndarray::Axis(0)));
        let ee = g.input(e_eps.clone().insert_axis(ndarray::Axis(0)));
        let (s_m, alpha) = self.forward(&mut g, es, em, ee);
        let a = g.value(alpha);
        SemanticFeature {
            s_m: g.value(s_m).clone(),
            gate_weights: (a[[0, 0]], a[[0, 1]]),
        }
    }
}

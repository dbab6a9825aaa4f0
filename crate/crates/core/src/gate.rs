//! Semantic variational information bottleneck: the per-frame gate.
//!
//! The semantic feature stream says *what* to gesture; a low-capacity audio
//! timing projection says *when*. Both feed two linear heads producing a
//! diagonal Gaussian posterior per frame. A reparameterized sample passes
//! through the latent sparsity interpreter (a two-layer MLP with softmax)
//! whose semantic-class probability is the gate Ψ. The posterior is pulled
//! toward N(0, I) by a KL term with a per-dimension free-bits floor: any
//! dimension whose KL sits below the floor receives no gradient.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{Conv1dLayer, LayerNorm, Linear, Mlp2};
use crate::nn::params::ParamStore;

/// Numerical guardrail for the log-variance head.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Probability clamp inside the weighted BCE.
pub const PSI_EPS: f64 = 1e-6;

/// Per-frame posterior, sample, and gate values recorded at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    pub z: Array2<f64>,
    pub psi: Vec<f64>,
    pub timing: Array2<f64>,
}

/// Gate evaluation mode: deterministic (z = mu) or sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Deterministic,
    Sampled,
}

pub struct FrameGate {
    conv1: Conv1dLayer,
    ln1: LayerNorm,
    conv2: Conv1dLayer,
    ln2: LayerNorm,
    timing_lin: Linear,
    timing_ln: LayerNorm,
    mu_head: Linear,
    logvar_head: Linear,
    kappa: Mlp2,
    pub bottleneck_dim: usize,
    pub timing_dim: usize,
}

impl FrameGate {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.cond_dim;
        FrameGate {
            conv1: Conv1dLayer::new(ps, rng, "svib.conv1", cfg.audio_dim, d, 3, 1, 1),
            ln1: LayerNorm::new(ps, "svib.ln1", d),
            conv2: Conv1dLayer::new(ps, rng, "svib.conv2", d, d, 3, 1, 1),
            ln2: LayerNorm::new(ps, "svib.ln2", d),
            timing_lin: Linear::new(ps, rng, "svib.timing", d, cfg.timing_dim),
            timing_ln: LayerNorm::new(ps, "svib.timing_ln", cfg.timing_dim),
            mu_head: Linear::new(
                ps,
                rng,
                "svib.mu",
                d + cfg.timing_dim,
                cfg.bottleneck_dim,
            ),
            logvar_head: Linear::new(
                ps,
                rng,
                "svib.logvar",
                d + cfg.timing_dim,
                cfg.bottleneck_dim,
            ),
            kappa: Mlp2::new(
                ps,
                rng,
                "svib.kappa",
                cfg.bottleneck_dim,
                cfg.bottleneck_dim,
                2,
            ),
            bottleneck_dim: cfg.bottleneck_dim,
            timing_dim: cfg.timing_dim,
        }
    }

    /// Audio timing projection: two temporal convolutions, then a linear
    /// bottleneck with normalization and GELU. Independent of the word
    /// stream by construction. Zero audio with zero biases yields exactly
    /// zero output (row normalization maps the zero vector to zero).
    pub fn timing_graph(&self, g: &mut Graph, e_a: NodeId) -> NodeId {
        let h = self.conv1.forward(g, e_a);
        let h = self.ln1.forward(g, h);
        let h = g.gelu(h);
        let h = self.conv2.forward(g, h);
        let h = self.ln2.forward(g, h);
        let h = g.gelu(h);
        let t = self.timing_lin.forward(g, h);
        let t = self.timing_ln.forward(g, t);
        g.gelu(t)
    }

    /// Bottleneck heads over the concatenated (S_m, timing) features.
    /// Returns `(mu, logvar)`, each (L, bottleneck_dim); logvar is clamped
    /// to ±`LOGVAR_CLAMP`.
    pub fn bottleneck_graph(&self, g: &mut Graph, s_m: NodeId, timing: NodeId) -> (NodeId, NodeId) {
        let cat = g.concat_cols(&[s_m, timing]);
        let mu = self.mu_head.forward(g, cat);
        let logvar = self.logvar_head.forward(g, cat);
        let logvar = g.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, logvar)
    }

    /// Reparameterized sample `z = mu + exp(logvar/2) ⊙ eps`. `eps` must be
    /// a constant node of the same shape (zeros in deterministic mode).
    pub fn sample_graph(&self, g: &mut Graph, mu: NodeId, logvar: NodeId, eps: NodeId) -> NodeId {
        let half = g.scale(logvar, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul(sigma, eps);
        g.add(mu, noise)
    }

    /// Latent sparsity interpreter: the semantic-class softmax probability.
    /// Returns `(psi (L,1), logits (L,2))`.
    pub fn gate_graph(&self, g: &mut Graph, z: NodeId) -> (NodeId, NodeId) {
        let logits = self.kappa.forward(g, z);
        let probs = g.softmax(logits);
        (g.slice_cols(probs, 1, 2), logits)
    }

    /// Value-level inference path producing a full [`GateTrace`].
    pub fn infer(
        &self,
        ps: &ParamStore,
        s_m: &Array2<f64>,
        e_a: &Array2<f64>,
        mode: GateMode,
        seed: u64,
    ) -> GateTrace {
        let l = s_m.nrows();
        let mut g = Graph::new(ps);
        let ea = g.input(e_a.clone());
        let sm = g.input(s_m.clone());
        let timing = self.timing_graph(&mut g, ea);
        let (mu, logvar) = self.bottleneck_graph(&mut g, sm, timing);
        let eps_val = match mode {
            GateMode::Deterministic => Array2::zeros((l, self.bottleneck_dim)),
            GateMode::Sampled => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Array2::from_shape_fn((l, self.bottleneck_dim), |_| {
                    StandardNormal.sample(&mut rng)
                })
            }
        };
        let eps = g.input(eps_val);
        let z = self.sample_graph(&mut g, mu, logvar, eps);
        let (psi, _) = self.gate_graph(&mut g, z);
        GateTrace {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
            z: g.value(z).clone(),
            psi: g.value(psi).column(0).to_vec(),
            timing: g.value(timing).clone(),
        }
    }
}

/// KL to the standard Gaussian with a per-dimension free-bits floor.
///
/// Per-dim KL is `½(μ² + e^logσ² − logσ² − 1)` averaged over frames; each
/// dimension is clamped below at `lambda_fb` and the total is the sum over
/// dimensions. Returns `(L_kl scalar node, per-dim KL node (1, Z))`.
pub fn kl_free_bits_graph(
    g: &mut Graph,
    mu: NodeId,
    logvar: NodeId,
    lambda_fb: f64,
) -> (NodeId, NodeId) {
    let mu2 = g.square(mu);
    let ev = g.exp(logvar);
    let sum = g.add(mu2, ev);
    let sum = g.sub(sum, logvar);
    let sum = g.add_scalar(sum, -1.0);
    let kl = g.scale(sum, 0.5);
    let per_dim = g.mean_rows(kl);
    let clamped = g.clamp_min(per_dim, lambda_fb);
    (g.sum_all(clamped), per_dim)
}

/// Weighted binary cross-entropy of the gate against per-frame semantic
/// flags, with positive-class boost `rho` and probability clamping.
pub fn semantic_loss_graph(g: &mut Graph, psi: NodeId, flags: &[u8], rho: f64) -> NodeId {
    let l = flags.len();
    let s = Array2::from_shape_fn((l, 1), |(t, _)| flags[t] as f64);
    let s_node = g.input(s.clone());
    let s_inv = g.input(s.mapv(|v| 1.0 - v));
    let p = g.clamp(psi, PSI_EPS, 1.0 - PSI_EPS);
    let ln_p = g.ln(p);
    let negp = g.neg(p);
    let one_minus = g.add_scalar(negp, 1.0);
    let ln_q = g.ln(one_minus);
    let pos = g.mul(s_node, ln_p);
    let pos = g.scale(pos, rho);
    let negterm = g.mul(s_inv, ln_q);
    let total = g.add(pos, negterm);
    let mean = g.mean_all(total);
    g.neg(mean)
}

/// Closed-form per-dimension KL for plain values (test oracle convenience).
pub fn kl_per_dim(mu: &Array2<f64>, logvar: &Array2<f64>) -> Array1<f64> {
    let z = mu.ncols();
    let mut out = Array1::zeros(z);
    for d in 0..z {
        let mut acc = 0.0;
        for t in 0..mu.nrows() {
            let m = mu[[t, d]];
            let lv = logvar[[t, d]];
            acc += 0.5 * (m * m + lv.exp() - lv - 1.0);
        }
        out[d] = acc / mu.nrows() as f64;
    }
    out
}

//! Stage-1 regional residual-VQ tokenizer.
//!
//! One encoder–quantizer–decoder triple per body region. The encoder maps
//! region motion (L, J_r·6) to latents (L/latent_rate, code_dim); a stack of
//! residual codebooks quantizes the latents; the decoder mirrors the encoder
//! back to joint space. Codebooks are trained with exponential-moving-average
//! updates (decay 0.99) and dead entries are reseeded from batch latents.
//! Once frozen, the triple is immutable for the rest of training.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::features::FeatureBundle;
use crate::motion::MotionSequence;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{Conv1dLayer, Linear};
use crate::nn::params::{normal_init, Adam, ParamStore};
use crate::regions::Region;

pub const EMA_DECAY: f64 = 0.99;
pub const COMMITMENT_WEIGHT: f64 = 0.25;
pub const DEAD_CODE_STEPS: u64 = 200;

/// Discrete token indices, (L', levels), all in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Array2<usize>,
}

impl TokenGrid {
    pub fn latent_len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn levels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for &t in self.tokens.iter() {
            if t >= k {
                return Err(CoreError::TokenOutOfRange { token: t, k });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Joints carried by this codec (post-stub: at least 1).
    pub joint_count: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    pub levels: usize,
    pub latent_rate: usize,
}

impl CodecConfig {
    pub fn for_region(region: Region, real_joints: usize, cfg: &ModelConfig) -> Self {
        CodecConfig {
            joint_count: real_joints.max(1),
            code_dim: cfg.cond_dim,
            hidden: cfg.cond_dim,
            codebook_size: cfg.codebook_size,
            levels: cfg.rvq_levels,
            latent_rate: if region == Region::Face {
                cfg.latent_rate_face
            } else {
                cfg.latent_rate_body
            },
        }
    }
}

/// Per-region encoder, residual codebooks, and decoder.
pub struct RegionCodec {
    pub region: Region,
    pub cfg: CodecConfig,
    pub frozen: bool,
    enc_in: Linear,
    enc_conv: Conv1dLayer,
    enc_down: Vec<Conv1dLayer>,
    enc_out: Linear,
    dec_in: Linear,
    dec_up: Vec<Conv1dLayer>,
    dec_conv: Conv1dLayer,
    dec_out: Linear,
    pub codebooks: Vec<Array2<f64>>,
    // EMA state, used only before freezing.
    ema_count: Vec<Array1<f64>>,
    ema_sum: Vec<Array2<f64>>,
    unused_steps: Vec<Vec<u64>>,
}

impl RegionCodec {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        region: Region,
        cfg: CodecConfig,
    ) -> Self {
        assert!(
            cfg.latent_rate.is_power_of_two(),
            "latent rate must be a power of two"
        );
        let n_down = cfg.latent_rate.trailing_zeros() as usize;
        let p = format!("codec.{}", region.name());
        let d_in = cfg.joint_count * 6;
        let enc_in = Linear::new(ps, rng, &format!("{p}.enc_in"), d_in, cfg.hidden);
        let enc_conv = Conv1dLayer::new(
            ps,
            rng,
            &format!("{p}.enc_conv"),
            cfg.hidden,
            cfg.hidden,
            3,
            1,
            1,
        );
        let enc_down = (0..n_down)
            .map(|i| {
                Conv1dLayer::new(
                    ps,
                    rng,
                    &format!("{p}.enc_down{i}"),
                    cfg.hidden,
                    cfg.hidden,
                    2,
                    2,
                    0,
                )
            })
            .collect();
        let enc_out = Linear::new(ps, rng, &format!("{p}.enc_out"), cfg.hidden, cfg.code_dim);
        let dec_in = Linear::new(ps, rng, &format!("{p}.dec_in"), cfg.code_dim, cfg.hidden);
        let dec_up = (0..n_down)
            .map(|i| {
                Conv1dLayer::new(
                    ps,
                    rng,
                    &format!("{p}.dec_up{i}"),
                    cfg.hidden,
                    cfg.hidden,
                    3,
                    1,
                    1,
                )
            })
            .collect();
        let dec_conv = Conv1dLayer::new(
            ps,
            rng,
            &format!("{p}.dec_conv"),
            cfg.hidden,
            cfg.hidden,
            3,
            1,
            1,
        );
        let dec_out = Linear::new(ps, rng, &format!("{p}.dec_out"), cfg.hidden, d_in);
        let codebooks: Vec<Array2<f64>> = (0..cfg.levels)
            .map(|_| normal_init(rng, cfg.codebook_size, cfg.code_dim, 0.5))
            .collect();
        let ema_count = (0..cfg.levels)
            .map(|_| Array1::ones(cfg.codebook_size))
            .collect();
        let ema_sum = codebooks.clone();
        let unused_steps = (0..cfg.levels)
            .map(|_| vec![0u64; cfg.codebook_size])
            .collect();
        RegionCodec {
            region,
            cfg,
            frozen: false,
            enc_in,
            enc_conv,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_conv,
            dec_out,
            codebooks,
            ema_count,
            ema_sum,
            unused_steps,
        }
    }

    /// Encoder forward on the graph; input (L, J_r*6), output (L', code_dim).
    pub fn encode_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.enc_in.forward(g, x);
        let h = g.gelu(h);
        let h = self.enc_conv.forward(g, h);
        let mut h = g.gelu(h);
        for down in &self.enc_down {
            h = down.forward(g, h);
            h = g.gelu(h);
        }
        self.enc_out.forward(g, h)
    }

    /// Decoder forward on the graph; input (L', code_dim), output (L, J_r*6).
    pub fn decode_graph(&self, g: &mut Graph, z: NodeId) -> NodeId {
        let h = self.dec_in.forward(g, z);
        let mut h = g.gelu(h);
        for up in &self.dec_up {
            h = g.upsample_rows(h, 2);
            h = up.forward(g, h);
            h = g.gelu(h);
        }
        let h = self.dec_conv.forward(g, h);
        let h = g.gelu(h);
        self.dec_out.forward(g, h)
    }

    /// Encode region motion (L, J_r*6) to continuous latents (L', code_dim).
    pub fn encode(&self, ps: &ParamStore, region_motion: &Array2<f64>) -> Result<Array2<f64>> {
        let (l, d) = region_motion.dim();
        if d != self.cfg.joint_count * 6 {
            return Err(CoreError::ShapeMismatch {
                context: "rvq encode",
                expected: format!("(L, {})", self.cfg.joint_count * 6),
                got: format!("({l}, {d})"),
            });
        }
        if l % self.cfg.latent_rate != 0 {
            return Err(CoreError::NotDivisible {
                len: l,
                rate: self.cfg.latent_rate,
            });
        }
        let mut g = Graph::new(ps);
        let x = g.input(region_motion.clone());
        let z = self.encode_graph(&mut g, x);
        Ok(g.value(z).clone())
    }

    /// Residual nearest-neighbour quantization.
    ///
    /// Level `l` tokens pick the codebook vector closest to the residual
    /// after subtracting levels `< l`; ties break toward the lowest index.
    /// Returns the token grid, the quantized latents (sum over levels), and
    /// the residual remaining after each level.
    pub fn quantize(&self, latents: &Array2<f64>) -> (TokenGrid, Array2<f64>, Vec<Array2<f64>>) {
        self.quantize_levels(latents, self.cfg.levels)
    }

    /// Quantize using only the first `levels` codebooks.
    pub fn quantize_levels(
        &self,
        latents: &Array2<f64>,
        levels: usize,
    ) -> (TokenGrid, Array2<f64>, Vec<Array2<f64>>) {
        let levels = levels.min(self.cfg.levels);
        let (l, d) = latents.dim();
        let mut tokens = Array2::zeros((l, levels));
        let mut quantized = Array2::zeros((l, d));
        let mut residual = latents.clone();
        let mut residuals = Vec::with_capacity(levels);
        for level in 0..levels {
            let cb = &self.codebooks[level];
            for t in 0..l {
                let r = residual.row(t);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, code) in cb.rows().into_iter().enumerate() {
                    let mut dist = 0.0;
                    for (a, b) in r.iter().zip(code.iter()) {
                        let df = a - b;
                        dist += df * df;
                    }
                    if dist < best_d {
                        best_d = dist;
                        best = k;
                    }
                }
                tokens[[t, level]] = best;
                for c in 0..d {
                    let q = cb[[best, c]];
                    quantized[[t, c]] += q;
                    residual[[t, c]] -= q;
                }
            }
            residuals.push(residual.clone());
        }
        (TokenGrid { tokens }, quantized, residuals)
    }

    /// Sum of codebook vectors selected by a token grid.
    pub fn lookup(&self, grid: &TokenGrid) -> Result<Array2<f64>> {
        grid.validate(self.cfg.codebook_size)?;
        let l = grid.latent_len();
        let mut z = Array2::zeros((l, self.cfg.code_dim));
        for t in 0..l {
            for level in 0..grid.levels() {
                let k = grid.tokens[[t, level]];
                for c in 0..self.cfg.code_dim {
                    z[[t, c]] += self.codebooks[level][[k, c]];
                }
            }
        }
        Ok(z)
    }

    /// Decode a token grid to region motion (L, J_r*6).
    pub fn decode(&self, ps: &ParamStore, grid: &TokenGrid) -> Result<Array2<f64>> {
        let z = self.lookup(grid)?;
        let mut g = Graph::new(ps);
        let zn = g.input(z);
        let out = self.decode_graph(&mut g, zn);
        Ok(g.value(out).clone())
    }

    /// EMA codebook update from encoder latents (training only).
    fn ema_update(&mut self, latents: &Array2<f64>, rng: &mut ChaCha8Rng) {
        assert!(!self.frozen, "EMA update on a frozen codec");
        let (l, d) = latents.dim();
        let mut residual = latents.clone();
        for level in 0..self.cfg.levels {
            // Assignments against the current codebook.
            let mut assign = vec![0usize; l];
            for t in 0..l {
                let r = residual.row(t);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, code) in self.codebooks[level].rows().into_iter().enumerate() {
                    let mut dist = 0.0;
                    for (a, b) in r.iter().zip(code.iter()) {
                        let df = a - b;
                        dist += df * df;
                    }
                    if dist < best_d {
                        best_d = dist;
                        best = k;
                    }
                }
                assign[t] = best;
            }
            // EMA statistics.
            let k_size = self.cfg.codebook_size;
            let mut counts = vec![0.0f64; k_size];
            let mut sums = Array2::<f64>::zeros((k_size, d));
            for t in 0..l {
                counts[assign[t]] += 1.0;
                let mut row = sums.row_mut(assign[t]);
                row += &residual.row(t);
            }
            for k in 0..k_size {
                self.ema_count[level][k] =
                    EMA_DECAY * self.ema_count[level][k] + (1.0 - EMA_DECAY) * counts[k];
                for c in 0..d {
                    self.ema_sum[level][[k, c]] =
                        EMA_DECAY * self.ema_sum[level][[k, c]] + (1.0 - EMA_DECAY) * sums[[k, c]];
                }
                if counts[k] > 0.0 {
                    self.unused_steps[level][k] = 0;
                } else {
                    self.unused_steps[level][k] += 1;
                }
                let n = self.ema_count[level][k].max(1e-6);
                for c in 0..d {
                    self.codebooks[level][[k, c]] = self.ema_sum[level][[k, c]] / n;
                }
                // Dead-code reseeding from a random batch latent.
                if self.unused_steps[level][k] > DEAD_CODE_STEPS {
                    let t = rng.random_range(0..l);
                    for c in 0..d {
                        self.codebooks[level][[k, c]] = residual[[t, c]];
                        self.ema_sum[level][[k, c]] = residual[[t, c]];
                    }
                    self.ema_count[level][k] = 1.0;
                    self.unused_steps[level][k] = 0;
                }
            }
            // Advance to the next level's residual.
            for t in 0..l {
                let k = assign[t];
                for c in 0..d {
                    residual[[t, c]] -= self.codebooks[level][[k, c]];
                }
            }
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Codebooks as named arrays for checkpointing.
    pub fn export_codebooks(&self) -> Vec<(String, Array2<f64>)> {
        self.codebooks
            .iter()
            .enumerate()
            .map(|(i, cb)| (format!("codec.{}.codebook.{i}", self.region.name()), cb.clone()))
            .collect()
    }

    pub fn import_codebooks(&mut self, arrays: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        for i in 0..self.cfg.levels {
            let name = format!("codec.{}.codebook.{i}", self.region.name());
            let arr = arrays.get(&name).ok_or_else(|| {
                CoreError::InvalidConfig(format!("checkpoint missing array {name}"))
            })?;
            if arr.dim() != self.codebooks[i].dim() {
                return Err(CoreError::ShapeMismatch {
                    context: "codebook import",
                    expected: format!("{:?}", self.codebooks[i].dim()),
                    got: format!("{:?}", arr.dim()),
                });
            }
            self.codebooks[i] = arr.clone();
        }
        Ok(())
    }
}

/// Extract the (L, J_r·6) matrix for one region; empty regions get a
/// one-joint zero stub so the face path stays exercised at desk scale.
pub fn region_matrix(seq: &MotionSequence, region: Region) -> Array2<f64> {
    let joints = seq.partition.joints_of(region);
    let l = seq.len();
    if joints.is_empty() {
        return Array2::zeros((l, 6));
    }
    let mut m = Array2::zeros((l, joints.len() * 6));
    for t in 0..l {
        for (ji, &j) in joints.iter().enumerate() {
            for c in 0..6 {
                m[[t, ji * 6 + c]] = seq.frames[[t, j, c]];
            }
        }
    }
    m
}

/// Scatter a region matrix back into an (L, J, 6) motion tensor.
pub fn scatter_region(target: &mut Array3<f64>, joints: &[usize], m: &Array2<f64>) {
    for t in 0..m.nrows() {
        for (ji, &j) in joints.iter().enumerate() {
            for c in 0..6 {
                target[[t, j, c]] = m[[t, ji * 6 + c]];
            }
        }
    }
}

/// All four regional codecs plus their parameter store.
pub struct CodecSet {
    pub store: ParamStore,
    pub codecs: BTreeMap<Region, RegionCodec>,
}

impl CodecSet {
    /// Freshly initialized codec set with the shapes implied by the config
    /// and partition; used as the loading target for checkpoints.
    pub fn build(cfg: &ModelConfig, partition: &crate::regions::RegionPartition, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codecs = BTreeMap::new();
        for region in Region::ALL {
            let real = partition.joints_of(region).len();
            let ccfg = CodecConfig::for_region(region, real, cfg);
            codecs.insert(region, RegionCodec::new(&mut store, &mut rng, region, ccfg));
        }
        CodecSet { store, codecs }
    }

    pub fn freeze_all(&mut self) {
        for codec in self.codecs.values_mut() {
            codec.freeze();
        }
        self.store.freeze_prefix("codec.");
    }

    /// All parameters plus codebooks as named arrays, sorted by name.
    pub fn export(&self) -> Vec<(String, Array2<f64>)> {
        let mut out: Vec<(String, Array2<f64>)> = self
            .store
            .iter()
            .map(|(_, name, val)| (name.to_string(), val.clone()))
            .collect();
        for codec in self.codecs.values() {
            out.extend(codec.export_codebooks());
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Load named arrays produced by [`CodecSet::export`].
    pub fn import(&mut self, arrays: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        let ids: Vec<(crate::nn::params::ParamId, String)> = self
            .store
            .iter()
            .map(|(id, name, _)| (id, name.to_string()))
            .collect();
        for (id, name) in ids {
            let arr = arrays.get(&name).ok_or_else(|| {
                CoreError::InvalidConfig(format!("checkpoint missing array {name}"))
            })?;
            if arr.dim() != self.store.value(id).dim() {
                return Err(CoreError::ShapeMismatch {
                    context: "codec checkpoint import",
                    expected: format!("{:?}", self.store.value(id).dim()),
                    got: format!("{:?}", arr.dim()),
                });
            }
            *self.store.value_mut(id) = arr.clone();
        }
        for codec in self.codecs.values_mut() {
            codec.import_codebooks(arrays)?;
        }
        Ok(())
    }

    pub fn frozen(&self) -> bool {
        self.codecs.values().all(|c| c.frozen)
    }

    /// Hash over every codec parameter and codebook; used to assert that
    /// freezing holds through Stage-2 training.
    pub fn content_hash(&self) -> u64 {
        let mut h = self.store.hash_prefix("codec.");
        for codec in self.codecs.values() {
            for cb in &codec.codebooks {
                for &v in cb.iter() {
                    for byte in v.to_le_bytes() {
                        h ^= byte as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        }
        h
    }
}

/// Train one codec per region on the dataset, then freeze all of them.
///
/// Loss per step: reconstruction MSE plus `COMMITMENT_WEIGHT` times the
/// commitment term `‖z_e − sg(z_q)‖²`; codebooks move by EMA, not gradient.
pub fn pretrain_codecs(
    dataset: &[(MotionSequence, FeatureBundle)],
    cfg: &ModelConfig,
    steps: usize,
    seed: u64,
) -> Result<CodecSet> {
    if dataset.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let partition = &dataset[0].0.partition;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codecs = BTreeMap::new();
    for region in Region::ALL {
        let real = partition.joints_of(region).len();
        let ccfg = CodecConfig::for_region(region, real, cfg);
        codecs.insert(region, RegionCodec::new(&mut store, &mut rng, region, ccfg));
    }
    // Region motion matrices per clip, reused across steps.
    let mut region_data: BTreeMap<Region, Vec<Array2<f64>>> = BTreeMap::new();
    for region in Region::ALL {
        region_data.insert(
            region,
            dataset.iter().map(|(m, _)| region_matrix(m, region)).collect(),
        );
    }
    let mut adam = Adam::new(store.len());
    let batch = cfg.batch.min(dataset.len());
    for step in 0..steps {
        // Deterministic batch rotation.
        let start = (step * batch) % dataset.len();
        let idx: Vec<usize> = (0..batch).map(|i| (start + i) % dataset.len()).collect();
        let mut grads = crate::nn::graph::Grads::new(store.len());
        let mut latents_for_ema: BTreeMap<Region, Vec<Array2<f64>>> = BTreeMap::new();
        for &ci in &idx {
            let mut g = Graph::new(&store);
            let mut losses = Vec::new();
            for region in Region::ALL {
                let codec = &codecs[&region];
                let x_val = &region_data[&region][ci];
                let x = g.input(x_val.clone());
                let z = codec.encode_graph(&mut g, x);
                let (_, quantized, _) = codec.quantize(g.value(z));
                let z_q = g.straight_through(z, &quantized);
                let recon = codec.decode_graph(&mut g, z_q);
                let rec_loss = g.mse(recon, x);
                let q_const = g.input(quantized.clone());
                let commit = g.mse(z, q_const);
                let commit = g.scale(commit, COMMITMENT_WEIGHT);
                losses.push(g.add(rec_loss, commit));
                latents_for_ema
                    .entry(region)
                    .or_default()
                    .push(g.value(z).clone());
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l);
            }
            let total = g.scale(total, 1.0 / batch as f64);
            grads.merge(&g.backward(total));
        }
        adam.step(&mut store, &grads, cfg.lr);
        for region in Region::ALL {
            let stacked = latents_for_ema.remove(&region).unwrap();
            let views: Vec<_> = stacked.iter().map(|a| a.view()).collect();
            let all = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
            codecs.get_mut(&region).unwrap().ema_update(&all, &mut rng);
        }
    }
    for codec in codecs.values_mut() {
        codec.freeze();
    }
    store.freeze_prefix("codec.");
    Ok(CodecSet { store, codecs })
}

/// Mean reconstruction MSE of a frozen codec over clips, quantizing with the
/// first `levels` codebooks.
pub fn reconstruction_mse(
    codec: &RegionCodec,
    store: &ParamStore,
    clips: &[Array2<f64>],
    levels: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for x in clips {
        let z = codec.encode(store, x)?;
        let (grid, _, _) = codec.quantize_levels(&z, levels);
        let recon = codec.decode(store, &grid)?;
        let diff = x - &recon;
        total += diff.mapv(|v| v * v).mean().unwrap();
    }
    Ok(total / clips.len() as f64)
}

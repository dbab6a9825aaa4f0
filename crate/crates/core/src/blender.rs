//! Two-stream hierarchical blender.
//!
//! Both streams share a masked seed-pose backbone: the 4 seed frames pass
//! through a frozen encoder, remaining frames become a learned mask token,
//! speaker identity and periodic positional encodings are added, and one
//! self-attention layer mixes time. The beat stream then cross-attends over
//! the audio timing projection, the semantic stream over the gated semantic
//! features. Region MLPs and a temporal downsample produce per-region
//! latents at the latent rate; hierarchical cross-attention lets each region
//! attend to the sum of its siblings. Fusion is the convex per-frame blend
//! `Z = (1−Ψ)Ẑ_b + ΨẐ_s`, followed by nearest-neighbour quantization in the
//! frozen Stage-1 codebooks. The face has its own audio-conditioned decoder
//! and bypasses both the gate and the inertial prior.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{
    periodic_positional_encoding, Conv1dLayer, CrossAttnBlock, DecoderLayer, Embedding, Linear,
    Mlp2, SelfAttnBlock,
};
use crate::nn::params::{normal_init, ParamId, ParamStore};
use crate::regions::Region;
use crate::rvq::{RegionCodec, TokenGrid};

/// Continuous and discrete latents produced for one clip.
#[derive(Debug, Clone)]
pub struct RegionLatentSet {
    pub z_beat: BTreeMap<Region, Array2<f64>>,
    pub z_sem: BTreeMap<Region, Array2<f64>>,
    pub z_hca_beat: BTreeMap<Region, Array2<f64>>,
    pub z_hca_sem: BTreeMap<Region, Array2<f64>>,
    pub z_fused: BTreeMap<Region, Array2<f64>>,
    pub tokens: BTreeMap<Region, TokenGrid>,
    pub z_face: Array2<f64>,
    pub face_tokens: TokenGrid,
}

/// Shared masked-seed backbone inputs for both streams.
pub struct StreamBase {
    seed1: Linear,
    seed2: Linear,
    seed3: Linear,
    mask_token: ParamId,
    pub id_embed: Embedding,
    hidden: usize,
    n_seed: usize,
}

impl StreamBase {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        joint_count: usize,
    ) -> Self {
        let h = cfg.hidden_dim;
        let d_in = joint_count * 6;
        // The seed encoder stays frozen for all of training.
        let seed1 = Linear::new(ps, rng, "seedenc.l1", d_in, h);
        let seed2 = Linear::new(ps, rng, "seedenc.l2", h, h);
        let seed3 = Linear::new(ps, rng, "seedenc.l3", h, h);
        ps.freeze_prefix("seedenc.");
        let mask_token = ps.add("blend.mask_token", normal_init(rng, 1, h, 0.2), true);
        let id_embed = Embedding::new(ps, rng, "blend.speaker", cfg.n_speakers, h);
        StreamBase {
            seed1,
            seed2,
            seed3,
            mask_token,
            id_embed,
            hidden: h,
            n_seed: cfg.n_seed_frames,
        }
    }

    /// Build the (L, hidden) base embedding: encoded seed frames, mask token
    /// on frames past the seed, speaker embedding, periodic positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        seed: NodeId,
        speaker_id: usize,
        total_len: usize,
    ) -> Result<NodeId> {
        if speaker_id >= self.id_embed.n {
            return Err(CoreError::UnknownSpeaker(speaker_id));
        }
        let h = self.seed1.forward(g, seed);
        let h = g.gelu(h);
        let h = self.seed2.forward(g, h);
        let h = g.gelu(h);
        let seed_emb = self.seed3.forward(g, h);
        let mask = g.param(self.mask_token);
        let masked = g.gather_rows(mask, &vec![0; total_len - self.n_seed]);
        let base = g.concat_rows(&[seed_emb, masked]);
        let id = self.id_embed.forward(g, speaker_id);
        let base = g.add_row(base, id);
        let pe = g.input(periodic_positional_encoding(total_len, self.hidden));
        Ok(g.add(base, pe))
    }
}

/// One generation stream (beat or semantic): self-attention, a stack of
/// cross-attention decoder layers over the stream memory, then per-region
/// MLPs and temporal downsampling.
pub struct LatentStream {
    pub self_attn: SelfAttnBlock,
    pub xattn: Vec<DecoderLayer>,
    region_mlps: BTreeMap<Region, Mlp2>,
    region_down: BTreeMap<Region, Vec<Conv1dLayer>>,
}

impl LatentStream {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        memory_dim: usize,
        n_layers: usize,
    ) -> Self {
        let h = cfg.hidden_dim;
        let ff = ModelConfig::ff_dim(h);
        let self_attn = SelfAttnBlock::new(ps, rng, &format!("{name}.self"), h, ff, cfg.heads);
        let xattn = (0..n_layers)
            .map(|i| {
                DecoderLayer::new(
                    ps,
                    rng,
                    &format!("{name}.xattn{i}"),
                    h,
                    memory_dim,
                    ff,
                    cfg.heads,
                )
            })
            .collect();
        let mut region_mlps = BTreeMap::new();
        let mut region_down = BTreeMap::new();
        let n_down = cfg.latent_rate_body.trailing_zeros() as usize;
        for region in Region::BODY {
            region_mlps.insert(
                region,
                Mlp2::new(
                    ps,
                    rng,
                    &format!("{name}.mlp.{}", region.name()),
                    h,
                    h,
                    cfg.cond_dim,
                ),
            );
            region_down.insert(
                region,
                (0..n_down)
                    .map(|i| {
                        Conv1dLayer::new(
                            ps,
                            rng,
                            &format!("{name}.down.{}.{i}", region.name()),
                            cfg.cond_dim,
                            cfg.cond_dim,
                            2,
                            2,
                            0,
                        )
                    })
                    .collect(),
            );
        }
        LatentStream {
            self_attn,
            xattn,
            region_mlps,
            region_down,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        base: NodeId,
        memory: NodeId,
    ) -> BTreeMap<Region, NodeId> {
        let mut x = self.self_attn.forward(g, base);
        for layer in &self.xattn {
            x = layer.forward(g, x, memory);
        }
        let mut out = BTreeMap::new();
        for region in Region::BODY {
            let mut z = self.region_mlps[&region].forward(g, x);
            for conv in &self.region_down[&region] {
                z = conv.forward(g, z);
            }
            out.insert(region, z);
        }
        out
    }
}

/// Hierarchical cross-attention: each region attends to the sum of its two
/// siblings as keys/values. Beat and semantic sets use separate instances.
pub struct HcaRefiner {
    blocks: BTreeMap<Region, CrossAttnBlock>,
}

impl HcaRefiner {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.cond_dim;
        let mut blocks = BTreeMap::new();
        for region in Region::BODY {
            blocks.insert(
                region,
                CrossAttnBlock::new(
                    ps,
                    rng,
                    &format!("{name}.{}", region.name()),
                    d,
                    d,
                    ModelConfig::ff_dim(d),
                    cfg.heads,
                ),
            );
        }
        HcaRefiner { blocks }
    }

    pub fn block(&self, region: Region) -> &CrossAttnBlock {
        &self.blocks[&region]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        z: &BTreeMap<Region, NodeId>,
    ) -> BTreeMap<Region, NodeId> {
        let sibling_sum = |g: &mut Graph, a: Region, b: Region| {
            let s = g.add(z[&a], z[&b]);
            s
        };
        let mut out = BTreeMap::new();
        let mem_h = sibling_sum(g, Region::Upper, Region::Lower);
        out.insert(
            Region::Hand,
            self.blocks[&Region::Hand].forward(g, z[&Region::Hand], mem_h),
        );
        let mem_u = sibling_sum(g, Region::Hand, Region::Lower);
        out.insert(
            Region::Upper,
            self.blocks[&Region::Upper].forward(g, z[&Region::Upper], mem_u),
        );
        let mem_l = sibling_sum(g, Region::Upper, Region::Hand);
        out.insert(
            Region::Lower,
            self.blocks[&Region::Lower].forward(g, z[&Region::Lower], mem_l),
        );
        out
    }
}

/// Audio-conditioned face decoder. Queries are a learned token plus periodic
/// positions; memory is the raw frame-level audio feature. Output is at the
/// face latent rate (two k=2,s=2 downsamples). No gate and no inertial
/// weighting touch this path.
pub struct FaceDecoder {
    query_token: ParamId,
    layers: Vec<DecoderLayer>,
    down_lin: Linear,
    down_convs: Vec<Conv1dLayer>,
    out_mlp: Mlp2,
    hidden: usize,
}

impl FaceDecoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let ff = ModelConfig::ff_dim(h);
        let query_token = ps.add("face.query", normal_init(rng, 1, h, 0.2), true);
        let layers = (0..cfg.face_layers)
            .map(|i| {
                DecoderLayer::new(ps, rng, &format!("face.layer{i}"), h, cfg.audio_dim, ff, cfg.heads)
            })
            .collect();
        let down_lin = Linear::new(ps, rng, "face.down_lin", h, cfg.cond_dim);
        let n_down = cfg.latent_rate_face.trailing_zeros() as usize;
        let down_convs = (0..n_down)
            .map(|i| {
                Conv1dLayer::new(
                    ps,
                    rng,
                    &format!("face.down{i}"),
                    cfg.cond_dim,
                    cfg.cond_dim,
                    2,
                    2,
                    0,
                )
            })
            .collect();
        let out_mlp = Mlp2::new(ps, rng, "face.out", cfg.cond_dim, cfg.cond_dim, cfg.cond_dim);
        FaceDecoder {
            query_token,
            layers,
            down_lin,
            down_convs,
            out_mlp,
            hidden: h,
        }
    }

    pub fn forward(&self, g: &mut Graph, e_a: NodeId, total_len: usize) -> NodeId {
        let q = g.param(self.query_token);
        let mut x = g.gather_rows(q, &vec![0; total_len]);
        let pe = g.input(periodic_positional_encoding(total_len, self.hidden));
        x = g.add(x, pe);
        for layer in &self.layers {
            x = layer.forward(g, x, e_a);
        }
        let mut z = self.down_lin.forward(g, x);
        for conv in &self.down_convs {
            z = conv.forward(g, z);
            z = g.gelu(z);
        }
        self.out_mlp.forward(g, z)
    }
}

/// Mean-pool the frame-level gate onto the latent timeline.
pub fn pool_psi(psi: &[f64], rate: usize) -> Vec<f64> {
    debug_assert_eq!(psi.len() % rate, 0);
    psi.chunks(rate)
        .map(|w| w.iter().sum::<f64>() / rate as f64)
        .collect()
}

/// Convex per-frame blend of the two refined streams (value level).
pub fn fuse_values(z_b: &Array2<f64>, z_s: &Array2<f64>, psi_lat: &[f64]) -> Array2<f64> {
    debug_assert_eq!(z_b.nrows(), psi_lat.len());
    let mut out = z_b.clone();
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let p = psi_lat[t];
        for (c, v) in row.iter_mut().enumerate() {
            *v = (1.0 - p) * z_b[[t, c]] + p * z_s[[t, c]];
        }
    }
    out
}

/// In-graph convex blend; `psi_lat` is an (L', 1) node.
pub fn fuse_graph(g: &mut Graph, z_b: NodeId, z_s: NodeId, psi_lat: NodeId) -> NodeId {
    let neg = g.neg(psi_lat);
    let one_minus = g.add_scalar(neg, 1.0);
    let b = g.mul_col(z_b, one_minus);
    let s = g.mul_col(z_s, psi_lat);
    g.add(b, s)
}

/// Fusion, nearest-neighbour token selection, and frozen Stage-1 decoding
/// for a full clip. `psi` is at frame rate; the face path ignores it.
/// Returns per-region tokens, the assembled (L, J, 6) motion, and the fused
/// continuous latents.
#[allow(clippy::too_many_arguments)]
pub fn fuse_quantize_decode(
    store: &ParamStore,
    codecs: &BTreeMap<Region, RegionCodec>,
    partition: &crate::regions::RegionPartition,
    z_hca_beat: &BTreeMap<Region, Array2<f64>>,
    z_hca_sem: &BTreeMap<Region, Array2<f64>>,
    z_face: &Array2<f64>,
    psi: &[f64],
    total_len: usize,
) -> Result<(BTreeMap<Region, TokenGrid>, TokenGrid, Array3<f64>, BTreeMap<Region, Array2<f64>>)> {
    for codec in codecs.values() {
        if !codec.frozen {
            return Err(CoreError::CodecNotFrozen);
        }
    }
    let mut tokens = BTreeMap::new();
    let mut fused_all = BTreeMap::new();
    let mut motion = Array3::zeros((total_len, partition.joint_count, 6));
    for region in Region::BODY {
        let codec = &codecs[&region];
        let psi_lat = pool_psi(psi, codec.cfg.latent_rate);
        let fused = fuse_values(&z_hca_beat[&region], &z_hca_sem[&region], &psi_lat);
        let (grid, _, _) = codec.quantize(&fused);
        let decoded = codec.decode(store, &grid)?;
        scatter(&mut motion, partition.joints_of(region), &decoded);
        tokens.insert(region, grid);
        fused_all.insert(region, fused);
    }
    let face_codec = &codecs[&Region::Face];
    let (face_grid, _, _) = face_codec.quantize(z_face);
    let face_joints = partition.joints_of(Region::Face);
    if !face_joints.is_empty() {
        let decoded = face_codec.decode(store, &face_grid)?;
        scatter(&mut motion, face_joints, &decoded);
    }
    Ok((tokens, face_grid, motion, fused_all))
}

fn scatter(target: &mut Array3<f64>, joints: &[usize], m: &Array2<f64>) {
    crate::rvq::scatter_region(target, joints, m);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rvq::CodecConfig;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    struct Rig {
        ps: ParamStore,
        base: StreamBase,
        stream: LatentStream,
        cfg: ModelConfig,
    }

    fn build_rig(cfg: ModelConfig, mem_dim: usize, layers: usize, seed: u64) -> Rig {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = StreamBase::new(&mut ps, &mut rng, &cfg, 12);
        let stream = LatentStream::new(&mut ps, &mut rng, "beat", &cfg, mem_dim, layers);
        Rig {
            ps,
            base,
            stream,
            cfg,
        }
    }

    fn run_stream(rig: &Rig, seed_pose: &Array2<f64>, speaker: usize, memory: &Array2<f64>) -> BTreeMap<Region, Array2<f64>> {
        let mut g = Graph::new(&rig.ps);
        let seed = g.input(seed_pose.clone());
        let base = rig.base.forward(&mut g, seed, speaker, 64).unwrap();
        let mem = g.input(memory.clone());
        let out = rig.stream.forward(&mut g, base, mem);
        out.into_iter()
            .map(|(r, n)| (r, g.value(n).clone()))
            .collect()
    }

    #[test]
    fn beat_stream_shape_contract_at_reference_dims() {
        // Reference configuration: hidden 768, cond 256, timing 64, 8 layers.
        let cfg = ModelConfig::default();
        assert_eq!(cfg.audio_xattn_layers, 8);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = StreamBase::new(&mut ps, &mut rng, &cfg, 12);
        // Shape is layer-count independent; one layer keeps the test quick.
        let stream = LatentStream::new(&mut ps, &mut rng, "beat", &cfg, cfg.timing_dim, 1);
        let mut g = Graph::new(&ps);
        let seed = g.input(Array2::zeros((4, 72)));
        let b = base.forward(&mut g, seed, 3, 64).unwrap();
        let mem = g.input(Array2::zeros((64, cfg.timing_dim)));
        let out = stream.forward(&mut g, b, mem);
        for region in Region::BODY {
            assert_eq!(g.shape(out[&region]), (32, 256));
        }
    }

    #[test]
    fn unknown_speaker_rejected() {
        let rig = build_rig(ModelConfig::desk(), 16, 1, 1);
        let mut g = Graph::new(&rig.ps);
        let seed = g.input(Array2::zeros((4, 72)));
        assert!(matches!(
            rig.base.forward(&mut g, seed, 999, 64),
            Err(CoreError::UnknownSpeaker(999))
        ));
    }

    #[test]
    fn different_speakers_produce_different_latents() {
        let cfg = ModelConfig::desk();
        let rig = build_rig(cfg.clone(), cfg.timing_dim, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let seed_pose = rand_mat(&mut rng, 4, 72);
            let memory = rand_mat(&mut rng, 64, cfg.timing_dim);
            let a = run_stream(&rig, &seed_pose, 0, &memory);
            let b = run_stream(&rig, &seed_pose, 1, &memory);
            let gap: f64 = Region::BODY
                .iter()
                .map(|r| {
                    (&a[r] - &b[r]).mapv(|v| v * v).sum()
                })
                .sum();
            assert!(gap > 0.0, "speaker embedding had no effect");
        }
    }

    #[test]
    fn timing_memory_is_consumed() {
        let cfg = ModelConfig::desk();
        let rig = build_rig(cfg.clone(), cfg.timing_dim, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seed_pose = rand_mat(&mut rng, 4, 72);
        let zero_mem = Array2::zeros((64, cfg.timing_dim));
        let real_mem = rand_mat(&mut rng, 64, cfg.timing_dim);
        let a = run_stream(&rig, &seed_pose, 0, &zero_mem);
        let b = run_stream(&rig, &seed_pose, 0, &real_mem);
        let gap: f64 = Region::BODY
            .iter()
            .map(|r| (&a[r] - &b[r]).mapv(f64::abs).sum())
            .sum();
        assert!(gap > 1e-6, "cross-attention ignored its memory");
    }

    #[test]
    fn semantic_stream_zero_gate_matches_zero_memory_baseline() {
        // psi = 0 gates the semantic memory to all-zero, so the stream must
        // equal its S_m-independent baseline.
        let cfg = ModelConfig::desk();
        let rig = build_rig(cfg.clone(), cfg.cond_dim, 1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seed_pose = rand_mat(&mut rng, 4, 72);
        let s_m = rand_mat(&mut rng, 64, cfg.cond_dim);
        let psi_zero = Array2::zeros((64, 1));
        // gated memory
        let gated: BTreeMap<Region, Array2<f64>> = {
            let mut g = Graph::new(&rig.ps);
            let seed = g.input(seed_pose.clone());
            let base = rig.base.forward(&mut g, seed, 0, 64).unwrap();
            let sm = g.input(s_m.clone());
            let psi = g.input(psi_zero.clone());
            let mem = g.mul_col(sm, psi);
            let out = rig.stream.forward(&mut g, base, mem);
            out.into_iter().map(|(r, n)| (r, g.value(n).clone())).collect()
        };
        let baseline = run_stream(&rig, &seed_pose, 0, &Array2::zeros((64, cfg.cond_dim)));
        for region in Region::BODY {
            for (a, b) in gated[&region].iter().zip(baseline[&region].iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn semantic_stream_is_sensitive_to_single_frame_perturbation() {
        let cfg = ModelConfig::desk();
        let rig = build_rig(cfg.clone(), cfg.cond_dim, 1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seed_pose = rand_mat(&mut rng, 4, 72);
        let s_m = rand_mat(&mut rng, 64, cfg.cond_dim);
        let mut s_m2 = s_m.clone();
        for c in 0..cfg.cond_dim {
            s_m2[[20, c]] += 0.5;
        }
        let a = run_stream(&rig, &seed_pose, 0, &s_m);
        let b = run_stream(&rig, &seed_pose, 0, &s_m2);
        let gap: f64 = Region::BODY
            .iter()
            .map(|r| (&a[r] - &b[r]).mapv(f64::abs).sum())
            .sum();
        assert!(gap > 1e-9, "sensitivity {gap}");
    }

    fn build_hca(seed: u64) -> (ParamStore, HcaRefiner, ModelConfig) {
        let cfg = ModelConfig::desk();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hca = HcaRefiner::new(&mut ps, &mut rng, "hca_b", &cfg);
        (ps, hca, cfg)
    }

    #[test]
    fn hca_preserves_shapes_and_sibling_sum_commutes() {
        let (ps, hca, cfg) = build_hca(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zu = rand_mat(&mut rng, 32, cfg.cond_dim);
        let zl = rand_mat(&mut rng, 32, cfg.cond_dim);
        let zh = rand_mat(&mut rng, 32, cfg.cond_dim);
        let run = |u: &Array2<f64>, l: &Array2<f64>| {
            let mut g = Graph::new(&ps);
            let mut z = BTreeMap::new();
            z.insert(Region::Hand, g.input(zh.clone()));
            z.insert(Region::Upper, g.input(u.clone()));
            z.insert(Region::Lower, g.input(l.clone()));
            let out = hca.forward(&mut g, &z);
            for r in Region::BODY {
                assert_eq!(g.shape(out[&r]), (32, cfg.cond_dim));
            }
            g.value(out[&Region::Hand]).clone()
        };
        // Swapping the upper and lower inputs leaves the hands memory
        // (their sum) unchanged, so the hands output is identical.
        let hands_a = run(&zu, &zl);
        let hands_b = run(&zl, &zu);
        for (a, b) in hands_a.iter().zip(hands_b.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn hca_zero_siblings_reduce_to_identity_wiring() {
        let (mut ps, hca, cfg) = build_hca(12);
        // Zero the value/output projections of the hands block plus its
        // feed-forward output so the block is exactly the residual path.
        let block = hca.block(Region::Hand);
        for p in [
            block.attn.wv.w,
            block.attn.wv.b,
            block.attn.wo.b,
            block.ff.l2.w,
            block.ff.l2.b,
        ] {
            ps.value_mut(p).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let zh = rand_mat(&mut rng, 16, cfg.cond_dim);
        let mut g = Graph::new(&ps);
        let mut z = BTreeMap::new();
        z.insert(Region::Hand, g.input(zh.clone()));
        z.insert(Region::Upper, g.input(Array2::zeros((16, cfg.cond_dim))));
        z.insert(Region::Lower, g.input(Array2::zeros((16, cfg.cond_dim))));
        let out = hca.forward(&mut g, &z);
        for (a, b) in g.value(out[&Region::Hand]).iter().zip(zh.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn face_decoder_shape_and_determinism() {
        let cfg = ModelConfig {
            audio_dim: 32,
            ..ModelConfig::desk()
        };
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let face = FaceDecoder::new(&mut ps, &mut rng, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let e_a = rand_mat(&mut rng, 64, cfg.audio_dim);
        let run = || {
            let mut g = Graph::new(&ps);
            let ea = g.input(e_a.clone());
            let z = face.forward(&mut g, ea, 64);
            g.value(z).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.dim(), (16, cfg.cond_dim));
        assert_eq!(a, b);
    }

    #[test]
    fn face_shape_contract_at_reference_dims() {
        let cfg = ModelConfig {
            face_layers: 1, // shape is layer-count independent
            ..ModelConfig::default()
        };
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let face = FaceDecoder::new(&mut ps, &mut rng, &cfg);
        let mut g = Graph::new(&ps);
        let ea = g.input(Array2::zeros((64, cfg.audio_dim)));
        let z = face.forward(&mut g, ea, 64);
        assert_eq!(g.shape(z), (16, 256));
    }

    fn tiny_codecs(cfg: &ModelConfig, seed: u64) -> (ParamStore, BTreeMap<Region, RegionCodec>) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let partition = crate::regions::default_region_partition(12).unwrap();
        let mut codecs = BTreeMap::new();
        for region in Region::ALL {
            let ccfg = CodecConfig::for_region(region, partition.joints_of(region).len(), cfg);
            let mut codec = RegionCodec::new(&mut ps, &mut rng, region, ccfg);
            codec.freeze();
            codecs.insert(region, codec);
        }
        ps.freeze_prefix("codec.");
        (ps, codecs)
    }

    #[test]
    fn fusion_endpoints_are_bit_exact_single_stream_quantization() {
        let cfg = ModelConfig::desk();
        let (ps, codecs) = tiny_codecs(&cfg, 17);
        let partition = crate::regions::default_region_partition(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let l = 64;
        let lp = l / cfg.latent_rate_body;
        let mut z_b = BTreeMap::new();
        let mut z_s = BTreeMap::new();
        for region in Region::BODY {
            z_b.insert(region, rand_mat(&mut rng, lp, cfg.cond_dim));
            z_s.insert(region, rand_mat(&mut rng, lp, cfg.cond_dim));
        }
        let z_face = rand_mat(&mut rng, l / cfg.latent_rate_face, cfg.cond_dim);
        for (psi_const, pick_beat) in [(0.0, true), (1.0, false)] {
            let psi = vec![psi_const; l];
            let (tokens, _, _, fused) = fuse_quantize_decode(
                &ps, &codecs, &partition, &z_b, &z_s, &z_face, &psi, l,
            )
            .unwrap();
            for region in Region::BODY {
                let single = if pick_beat { &z_b[&region] } else { &z_s[&region] };
                let (grid, _, _) = codecs[&region].quantize(single);
                assert_eq!(tokens[&region].tokens, grid.tokens);
                for (a, b) in fused[&region].iter().zip(single.iter()) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn fusion_of_equal_operands_is_identity_and_segment_property_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = rand_mat(&mut rng, 8, 5);
        let fused = fuse_values(&z, &z, &vec![0.5; 8]);
        for (a, b) in fused.iter().zip(z.iter()) {
            assert_eq!(a, b);
        }
        // componentwise segment membership over random triples
        for _ in 0..1000 {
            let zb = rand_mat(&mut rng, 4, 6);
            let zs = rand_mat(&mut rng, 4, 6);
            let psi: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let fused = fuse_values(&zb, &zs, &psi);
            for t in 0..4 {
                for c in 0..6 {
                    let (lo, hi) = if zb[[t, c]] < zs[[t, c]] {
                        (zb[[t, c]], zs[[t, c]])
                    } else {
                        (zs[[t, c]], zb[[t, c]])
                    };
                    assert!(fused[[t, c]] >= lo - 1e-12 && fused[[t, c]] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn token_selection_invariant_under_common_positive_scaling() {
        let cfg = ModelConfig::desk();
        let (_ps, mut codecs) = tiny_codecs(&cfg, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let codec = codecs.get_mut(&Region::Upper).unwrap();
        let zb = rand_mat(&mut rng, 8, cfg.cond_dim);
        let zs = rand_mat(&mut rng, 8, cfg.cond_dim);
        let psi: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let fused = fuse_values(&zb, &zs, &psi);
        let (grid_base, _, _) = codec.quantize(&fused);
        let scale = 3.7;
        for cb in codec.codebooks.iter_mut() {
            cb.mapv_inplace(|v| v * scale);
        }
        let fused_scaled = fuse_values(
            &zb.mapv(|v| v * scale),
            &zs.mapv(|v| v * scale),
            &psi,
        );
        let (grid_scaled, _, _) = codec.quantize(&fused_scaled);
        assert_eq!(grid_base.tokens, grid_scaled.tokens);
    }

    #[test]
    fn unfrozen_codec_rejected_by_fusion() {
        let cfg = ModelConfig::desk();
        let (ps, mut codecs) = tiny_codecs(&cfg, 22);
        codecs.get_mut(&Region::Hand).unwrap().frozen = false;
        let partition = crate::regions::default_region_partition(12).unwrap();
        let lp = 32;
        let mut z = BTreeMap::new();
        for region in Region::BODY {
            z.insert(region, Array2::zeros((lp, cfg.cond_dim)));
        }
        let z_face = Array2::zeros((16, cfg.cond_dim));
        let err = fuse_quantize_decode(
            &ps,
            &codecs,
            &partition,
            &z,
            &z,
            &z_face,
            &vec![0.0; 64],
            64,
        );
        assert!(matches!(err, Err(CoreError::CodecNotFrozen)));
    }

    #[test]
    fn psi_pooling_is_mean_per_window() {
        let psi = vec![0.0, 1.0, 0.5, 0.5, 1.0, 1.0];
        assert_eq!(pool_psi(&psi, 2), vec![0.5, 0.5, 1.0]);
    }
}

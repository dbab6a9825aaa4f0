//! Assembled Stage-2 generator: semantic conditioning, variational gate,
//! two latent streams, hierarchical refinement, fusion, and the frozen
//! Stage-1 codecs, all over one parameter store.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blender::{
    fuse_graph, fuse_quantize_decode, FaceDecoder, HcaRefiner, LatentStream, RegionLatentSet,
    StreamBase,
};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::features::FeatureBundle;
use crate::gate::{kl_free_bits_graph, semantic_loss_graph, FrameGate, GateMode, GateTrace};
use crate::inertia::{acc_loss_region_sum_graph, tau_region_columns, tau_weights, InertiaTable};
use crate::motion::MotionSequence;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::Linear;
use crate::nn::params::ParamStore;
use crate::regions::{Region, RegionPartition};
use crate::rvq::{region_matrix, CodecConfig, CodecSet, RegionCodec, TokenGrid};
use crate::semantic::SemanticConditioner;

/// Per-clip tensors with precomputed Stage-1 targets.
#[derive(Debug, Clone)]
pub struct ClipTensors {
    pub regions: BTreeMap<Region, Array2<f64>>,
    pub e_a: Array2<f64>,
    pub e_s: Array2<f64>,
    pub e_m: Array2<f64>,
    pub e_eps: Array2<f64>,
    pub seed: Array2<f64>,
    pub flags: Vec<u8>,
    pub speaker_id: usize,
    pub total_len: usize,
    pub vq_targets: BTreeMap<Region, Array2<f64>>,
    pub token_targets: BTreeMap<Region, TokenGrid>,
}

/// Loss nodes produced by one training forward pass.
pub struct LossNodes {
    pub l_lat: NodeId,
    pub l_cls: NodeId,
    pub l_sem: NodeId,
    pub l_kl: NodeId,
    pub l_acc: Option<NodeId>,
    pub psi: NodeId,
}

/// Output of eval-mode generation.
pub struct Generation {
    pub motion: MotionSequence,
    pub trace: GateTrace,
    pub latents: RegionLatentSet,
}

pub struct Stage2Model {
    pub cfg: ModelConfig,
    pub partition: RegionPartition,
    pub store: ParamStore,
    pub codecs: BTreeMap<Region, RegionCodec>,
    pub mgsc: SemanticConditioner,
    pub gate: FrameGate,
    pub base: StreamBase,
    pub beat: LatentStream,
    pub sem: LatentStream,
    pub hca_beat: HcaRefiner,
    pub hca_sem: HcaRefiner,
    pub face: FaceDecoder,
    cls_heads: BTreeMap<Region, Vec<Linear>>,
    pub inertia: InertiaTable,
}

impl Stage2Model {
    /// Build the Stage-2 model around a frozen codec set. Codec parameters
    /// and codebooks are copied into this model's store and frozen; all
    /// other parameters are freshly initialized from `seed`.
    pub fn new(
        cfg: ModelConfig,
        partition: RegionPartition,
        codec_set: &CodecSet,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if !codec_set.frozen() {
            return Err(CoreError::CodecNotFrozen);
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codecs = BTreeMap::new();
        for region in Region::ALL {
            let ccfg = CodecConfig::for_region(region, partition.joints_of(region).len(), &cfg);
            codecs.insert(region, RegionCodec::new(&mut store, &mut rng, region, ccfg));
        }
        // Adopt the pretrained codec weights and codebooks.
        for (_, name, val) in codec_set.store.iter() {
            let id = store.lookup(name).ok_or_else(|| {
                CoreError::InvalidConfig(format!("codec parameter {name} has no slot"))
            })?;
            if store.value(id).dim() != val.dim() {
                return Err(CoreError::ShapeMismatch {
                    context: "codec adoption",
                    expected: format!("{:?}", store.value(id).dim()),
                    got: format!("{:?}", val.dim()),
                });
            }
            *store.value_mut(id) = val.clone();
        }
        let mut cb_arrays = BTreeMap::new();
        for codec in codec_set.codecs.values() {
            for (name, cb) in codec.export_codebooks() {
                cb_arrays.insert(name, cb);
            }
        }
        for codec in codecs.values_mut() {
            codec.import_codebooks(&cb_arrays)?;
            codec.freeze();
        }
        store.freeze_prefix("codec.");

        let mgsc = SemanticConditioner::new(&mut store, &mut rng, &cfg);
        let gate = FrameGate::new(&mut store, &mut rng, &cfg);
        let base = StreamBase::new(&mut store, &mut rng, &cfg, partition.joint_count);
        let beat = LatentStream::new(
            &mut store,
            &mut rng,
            "beat",
            &cfg,
            cfg.timing_dim,
            cfg.audio_xattn_layers,
        );
        let sem = LatentStream::new(
            &mut store,
            &mut rng,
            "sem",
            &cfg,
            cfg.cond_dim,
            cfg.audio_xattn_layers,
        );
        let hca_beat = HcaRefiner::new(&mut store, &mut rng, "hca_b", &cfg);
        let hca_sem = HcaRefiner::new(&mut store, &mut rng, "hca_s", &cfg);
        let face = FaceDecoder::new(&mut store, &mut rng, &cfg);
        let mut cls_heads = BTreeMap::new();
        for region in Region::ALL {
            let heads: Vec<Linear> = (0..cfg.rvq_levels)
                .map(|level| {
                    Linear::new(
                        &mut store,
                        &mut rng,
                        &format!("cls.{}.{level}", region.name()),
                        cfg.cond_dim,
                        cfg.codebook_size,
                    )
                })
                .collect();
            cls_heads.insert(region, heads);
        }
        let inertia = InertiaTable::for_partition(&partition);
        inertia.validate()?;
        Ok(Stage2Model {
            cfg,
            partition,
            store,
            codecs,
            mgsc,
            gate,
            base,
            beat,
            sem,
            hca_beat,
            hca_sem,
            face,
            cls_heads,
            inertia,
        })
    }

    /// Validate a clip against the model contract and precompute the frozen
    /// Stage-1 targets.
    pub fn prepare_clip(&self, seq: &MotionSequence, feat: &FeatureBundle) -> Result<ClipTensors> {
        feat.check_finite()?;
        let l = seq.len();
        if l % self.cfg.latent_rate_body != 0 || l % self.cfg.latent_rate_face != 0 {
            return Err(CoreError::NotDivisible {
                len: l,
                rate: self.cfg.latent_rate_face,
            });
        }
        if feat.e_a.dim() != (l, self.cfg.audio_dim) {
            return Err(CoreError::ShapeMismatch {
                context: "clip e_a",
                expected: format!("({l}, {})", self.cfg.audio_dim),
                got: format!("{:?}", feat.e_a.dim()),
            });
        }
        if feat.e_s.dim() != (l, self.cfg.word_dim) {
            return Err(CoreError::ShapeMismatch {
                context: "clip e_s",
                expected: format!("({l}, {})", self.cfg.word_dim),
                got: format!("{:?}", feat.e_s.dim()),
            });
        }
        if feat.speaker_id >= self.cfg.n_speakers {
            return Err(CoreError::UnknownSpeaker(feat.speaker_id));
        }
        let mut regions = BTreeMap::new();
        let mut vq_targets = BTreeMap::new();
        let mut token_targets = BTreeMap::new();
        for region in Region::ALL {
            let m = region_matrix(seq, region);
            let codec = &self.codecs[&region];
            let z = codec.encode(&self.store, &m)?;
            let (grid, quantized, _) = codec.quantize(&z);
            regions.insert(region, m);
            vq_targets.insert(region, quantized);
            token_targets.insert(region, grid);
        }
        let seed_flat = flatten_pose(&feat.seed_pose);
        Ok(ClipTensors {
            regions,
            e_a: feat.e_a.clone(),
            e_s: feat.e_s.clone(),
            e_m: feat.e_m.clone().insert_axis(ndarray::Axis(0)),
            e_eps: feat.e_eps.clone().insert_axis(ndarray::Axis(0)),
            seed: seed_flat,
            flags: seq.semantic_flags.clone(),
            speaker_id: seq.speaker_id,
            total_len: l,
            vq_targets,
            token_targets,
        })
    }

    /// Training forward pass for one clip. `eps` is the reparameterization
    /// noise (constant); pass zeros for a deterministic pass. When
    /// `with_ibp` is false the inertial path is never built, so a run with
    /// `beta_phys = 0` is bit-identical to one without the module.
    pub fn forward_losses(
        &self,
        g: &mut Graph,
        clip: &ClipTensors,
        eps: &Array2<f64>,
        with_ibp: bool,
    ) -> Result<LossNodes> {
        let l = clip.total_len;
        let e_s = g.input(clip.e_s.clone());
        let e_m = g.input(clip.e_m.clone());
        let e_eps = g.input(clip.e_eps.clone());
        let e_a = g.input(clip.e_a.clone());
        let seed = g.input(clip.seed.clone());

        let (s_m, _alpha) = self.mgsc.forward(g, e_s, e_m, e_eps);
        let timing = self.gate.timing_graph(g, e_a);
        let (mu, logvar) = self.gate.bottleneck_graph(g, s_m, timing);
        let eps_node = g.input(eps.clone());
        let z = self.gate.sample_graph(g, mu, logvar, eps_node);
        let (psi, _) = self.gate.gate_graph(g, z);

        let base = self.base.forward(g, seed, clip.speaker_id, l)?;
        let z_beat = self.beat.forward(g, base, timing);
        let gated = g.mul_col(s_m, psi);
        let z_sem = self.sem.forward(g, base, gated);
        let zh_beat = self.hca_beat.forward(g, &z_beat);
        let zh_sem = self.hca_sem.forward(g, &z_sem);
        let z_face = self.face.forward(g, e_a, l);

        let psi_lat = g.mean_pool_rows(psi, self.cfg.latent_rate_body);
        let mut fused = BTreeMap::new();
        for region in Region::BODY {
            fused.insert(
                region,
                fuse_graph(g, zh_beat[&region], zh_sem[&region], psi_lat),
            );
        }
        fused.insert(Region::Face, z_face);

        // Latent regression and token classification, all regions.
        let mut lat_terms = Vec::new();
        let mut cls_terms = Vec::new();
        for region in Region::ALL {
            let target = g.input(clip.vq_targets[&region].clone());
            lat_terms.push(g.mse(fused[&region], target));
            let grid = &clip.token_targets[&region];
            grid.validate(self.cfg.codebook_size)?;
            for level in 0..self.cfg.rvq_levels {
                let logits = self.cls_heads[&region][level].forward(g, fused[&region]);
                let targets: Vec<usize> = grid.tokens.column(level).to_vec();
                cls_terms.push(g.cross_entropy(logits, &targets));
            }
        }
        let l_lat = sum_nodes(g, &lat_terms);
        let cls_sum = sum_nodes(g, &cls_terms);
        let l_cls = g.scale(cls_sum, 1.0 / cls_terms.len() as f64);
        let l_sem = semantic_loss_graph(g, psi, &clip.flags, self.cfg.rho);
        let (l_kl, _) = kl_free_bits_graph(g, mu, logvar, self.cfg.lambda_fb);

        let l_acc = if with_ibp {
            // τ is built from current gate values and treated as a constant:
            // the physics penalty shapes the beat stream, not the gate.
            let psi_vals: Vec<f64> = g.value(psi).column(0).to_vec();
            let logvar_vals = g.value(logvar).clone();
            let sigma2: Vec<f64> = (0..l)
                .map(|t| {
                    logvar_vals
                        .row(t)
                        .iter()
                        .map(|&lv| lv.exp())
                        .sum::<f64>()
                        / logvar_vals.ncols() as f64
                })
                .collect();
            let weights = tau_weights(
                &self.inertia,
                &psi_vals,
                &sigma2,
                self.cfg.tau_base,
                self.cfg.alpha_ibp,
            )?;
            let mut sums = Vec::new();
            let mut total_masked = 0usize;
            for region in Region::BODY {
                let joints = self.partition.joints_of(region);
                let (tau_cols, n_masked) = tau_region_columns(&weights, joints);
                if n_masked == 0 {
                    continue;
                }
                total_masked += n_masked;
                let decoded = self.codecs[&region].decode_graph(g, zh_beat[&region]);
                sums.push(acc_loss_region_sum_graph(g, decoded, &tau_cols));
            }
            if sums.is_empty() {
                None
            } else {
                let total = sum_nodes(g, &sums);
                Some(g.scale(total, 1.0 / ((l - 2) * total_masked) as f64))
            }
        } else {
            None
        };

        Ok(LossNodes {
            l_lat,
            l_cls,
            l_sem,
            l_kl,
            l_acc,
            psi,
        })
    }

    /// Semantic feature and gate trace only (cheap path for gate audits).
    pub fn infer_gate(&self, feat: &FeatureBundle, mode: GateMode, seed: u64) -> GateTrace {
        let sem = self.mgsc.infer(&self.store, &feat.e_s, &feat.e_m, &feat.e_eps);
        self.gate.infer(&self.store, &sem.s_m, &feat.e_a, mode, seed)
    }

    /// Full generation: gate, both streams, fusion, quantization, Stage-1
    /// decode. Deterministic in (checkpoint, features, mode, seed).
    pub fn generate(
        &self,
        feat: &FeatureBundle,
        fps: f64,
        mode: GateMode,
        seed: u64,
    ) -> Result<Generation> {
        feat.check_finite()?;
        let l = feat.e_a.nrows();
        if l % self.cfg.latent_rate_body != 0 || l % self.cfg.latent_rate_face != 0 {
            return Err(CoreError::NotDivisible {
                len: l,
                rate: self.cfg.latent_rate_face,
            });
        }
        if feat.speaker_id >= self.cfg.n_speakers {
            return Err(CoreError::UnknownSpeaker(feat.speaker_id));
        }
        let sem_feat = self.mgsc.infer(&self.store, &feat.e_s, &feat.e_m, &feat.e_eps);
        let trace = self
            .gate
            .infer(&self.store, &sem_feat.s_m, &feat.e_a, mode, seed);

        let mut g = Graph::new(&self.store);
        let seed_node = g.input(flatten_pose(&feat.seed_pose));
        let base = self.base.forward(&mut g, seed_node, feat.speaker_id, l)?;
        let e_a = g.input(feat.e_a.clone());
        let timing = g.input(trace.timing.clone());
        let z_beat = self.beat.forward(&mut g, base, timing);
        let s_m = g.input(sem_feat.s_m.clone());
        let psi_col = g.input(Array2::from_shape_fn((l, 1), |(t, _)| trace.psi[t]));
        let gated = g.mul_col(s_m, psi_col);
        let z_sem = self.sem.forward(&mut g, base, gated);
        let zh_beat = self.hca_beat.forward(&mut g, &z_beat);
        let zh_sem = self.hca_sem.forward(&mut g, &z_sem);
        let z_face_node = self.face.forward(&mut g, e_a, l);

        let take = |g: &Graph, m: &BTreeMap<Region, NodeId>| -> BTreeMap<Region, Array2<f64>> {
            m.iter().map(|(r, &n)| (*r, g.value(n).clone())).collect()
        };
        let z_beat_v = take(&g, &z_beat);
        let z_sem_v = take(&g, &z_sem);
        let zh_beat_v = take(&g, &zh_beat);
        let zh_sem_v = take(&g, &zh_sem);
        let z_face = g.value(z_face_node).clone();

        let (tokens, face_tokens, frames, fused) = fuse_quantize_decode(
            &self.store,
            &self.codecs,
            &self.partition,
            &zh_beat_v,
            &zh_sem_v,
            &z_face,
            &trace.psi,
            l,
        )?;
        let motion = MotionSequence {
            frames,
            fps,
            partition: self.partition.clone(),
            semantic_flags: trace.psi.iter().map(|&p| u8::from(p >= 0.5)).collect(),
            speaker_id: feat.speaker_id,
            emotion_id: 0,
            word_spans: Vec::new(),
        };
        Ok(Generation {
            motion,
            trace,
            latents: RegionLatentSet {
                z_beat: z_beat_v,
                z_sem: z_sem_v,
                z_hca_beat: zh_beat_v,
                z_hca_sem: zh_sem_v,
                z_fused: fused,
                tokens,
                z_face,
                face_tokens,
            },
        })
    }

    /// Decoded beat-path motion for the regions that carry inertial mass
    /// (evaluation hook for smoothness audits). Returns (L, J, 6) with
    /// unmasked regions left at zero.
    pub fn decode_beat_path(&self, latents: &RegionLatentSet, total_len: usize) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((total_len, self.partition.joint_count, 6));
        for region in Region::BODY {
            let joints = self.partition.joints_of(region);
            if !joints.iter().any(|&j| self.inertia.arm_chain_mask[j]) {
                continue;
            }
            let mut g = Graph::new(&self.store);
            let z = g.input(latents.z_hca_beat[&region].clone());
            let decoded = self.codecs[&region].decode_graph(&mut g, z);
            crate::rvq::scatter_region(&mut out, joints, g.value(decoded));
        }
        Ok(out)
    }

    /// Every parameter (including frozen codec weights and codebooks) as
    /// named arrays, for checkpointing.
    pub fn export_arrays(&self) -> Vec<(String, Array2<f64>)> {
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

    /// Load named arrays produced by [`export_arrays`]. Every store
    /// parameter must be present with a matching shape.
    pub fn import_arrays(&mut self, arrays: &BTreeMap<String, Array2<f64>>) -> Result<()> {
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
                    context: "checkpoint import",
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

    /// Hash of the frozen Stage-1 content.
    pub fn codec_hash(&self) -> u64 {
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

fn flatten_pose(pose: &Array3<f64>) -> Array2<f64> {
    let (t, j, c) = pose.dim();
    let mut out = Array2::zeros((t, j * c));
    for ti in 0..t {
        for ji in 0..j {
            for ci in 0..c {
                out[[ti, ji * c + ci]] = pose[[ti, ji, ci]];
            }
        }
    }
    out
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    acc
}

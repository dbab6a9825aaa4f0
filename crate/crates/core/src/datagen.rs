//! Synthetic dataset generator.
//!
//! Clips mimic the statistical structure the model and the analysis toolkit
//! target, without any real capture data:
//!
//! - **Beat motion**: gently damped sinusoidal rotations on the arm chain.
//!   Joint angles oscillate at half the beat frequency so the angular-speed
//!   channel (a rectified cosine) peaks at `beat_freq_hz`. Per-joint detune
//!   and phase jitter keep inter-joint phase locking moderate.
//! - **Semantic strokes**: sparse word-keyed templates. A trigger word drives
//!   all arm joints through one shared broadband time course, giving high
//!   inter-joint co-activation and a wider spectrum than beat motion.
//! - **Spine joints** carry a slow, large, highly predictable sway (so
//!   expanding an analysis group from the shoulder to arm+core raises the
//!   inertial-oscillator fit), while **lower-body joints** carry white noise
//!   (so expanding to all joints lowers it).
//!
//! All rotations are exact axis-angle rotations, so ground-truth rot6d
//! columns stay orthonormal. Randomness is counter-based and fully
//! reproducible: one ChaCha8 generator seeded with `rng_seed`, stream 0 for
//! dataset-level tables, stream `i + 1` for clip `i`. Every generated array
//! is rounded through f32 so that archived clips round-trip bit-identically.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::FeatureBundle;
use crate::motion::{MotionSequence, WordSpan};
use crate::regions::{default_region_partition, Region, RegionPartition};

pub const N_EMOTIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub n_speakers: usize,
    pub semantic_fraction: f64,
    pub beat_freq_hz: f64,
    pub semantic_freq_hz: f64,
    pub noise_level: f64,
    pub rng_seed: u64,
    pub frames_per_clip: usize,
    pub fps: f64,
    pub joint_count: usize,
    pub audio_dim: usize,
    pub word_dim: usize,
    pub style_dim: usize,
    pub n_words: usize,
    pub n_trigger_words: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clips: 200,
            n_speakers: 8,
            semantic_fraction: 0.12,
            beat_freq_hz: 1.12,
            semantic_freq_hz: 1.69,
            noise_level: 0.05,
            rng_seed: 0,
            frames_per_clip: 64,
            fps: 30.0,
            joint_count: 12,
            audio_dim: 1024,
            word_dim: 300,
            style_dim: 256,
            n_words: 64,
            n_trigger_words: 8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.semantic_fraction >= 0.0 && self.semantic_fraction < 1.0) {
            return Err(CoreError::InvalidConfig(
                "semantic_fraction must be in [0, 1)".into(),
            ));
        }
        for (name, f) in [
            ("beat_freq_hz", self.beat_freq_hz),
            ("semantic_freq_hz", self.semantic_freq_hz),
        ] {
            if !(f > 0.0 && f < self.fps / 2.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must lie in (0, fps/2)"
                )));
            }
        }
        if self.n_trigger_words > self.n_words {
            return Err(CoreError::InvalidConfig(
                "n_trigger_words must not exceed n_words".into(),
            ));
        }
        if self.frames_per_clip < 48 {
            return Err(CoreError::InvalidConfig(
                "frames_per_clip must be at least 48".into(),
            ));
        }
        default_region_partition(self.joint_count)?;
        Ok(())
    }
}

/// Dataset-level tables, derived from stream 0 of the seed.
struct Globals {
    partition: RegionPartition,
    word_embeddings: Array2<f64>,
    speaker_style: Array2<f64>,
    emotion_style: Array2<f64>,
    /// Per-speaker, per-joint rest angle.
    base_angle: Array2<f64>,
    /// Per-joint rotation axis (unit 3-vectors).
    joint_axis: Array2<f64>,
    /// Per-trigger-word template phases for the three stroke harmonics.
    trigger_phase: Array2<f64>,
    /// Audio feature basis: rows are envelope / pulse direction vectors.
    audio_basis: Array2<f64>,
}

fn unit3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl Globals {
    fn new(spec: &SynthSpec) -> Result<Self> {
        let partition = default_region_partition(spec.joint_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        rng.set_stream(0);
        let word_embeddings = normal_mat(&mut rng, spec.n_words, spec.word_dim, 1.0);
        let speaker_style = normal_mat(&mut rng, spec.n_speakers, spec.style_dim, 1.0);
        let emotion_style = normal_mat(&mut rng, N_EMOTIONS, spec.style_dim, 1.0);
        let base_angle = normal_mat(&mut rng, spec.n_speakers, spec.joint_count, 0.2);
        let mut joint_axis = Array2::zeros((spec.joint_count, 3));
        for j in 0..spec.joint_count {
            let a = unit3(&mut rng);
            joint_axis[[j, 0]] = a[0];
            joint_axis[[j, 1]] = a[1];
            joint_axis[[j, 2]] = a[2];
        }
        let trigger_phase = Array2::from_shape_fn((spec.n_trigger_words.max(1), 3), |_| {
            rng.random_range(0.0..std::f64::consts::TAU)
        });
        let audio_basis = normal_mat(&mut rng, 2, spec.audio_dim, 1.0);
        Ok(Globals {
            partition,
            word_embeddings,
            speaker_style,
            emotion_style,
            base_angle,
            joint_axis,
            trigger_phase,
            audio_basis,
        })
    }
}

/// rot6d (first two rotation-matrix columns) of the rotation by `angle`
/// around `axis`.
fn axis_angle_rot6d(axis: [f64; 3], angle: f64) -> [f64; 6] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    // Columns 0 and 1 of the Rodrigues rotation matrix.
    [
        c + t * x * x,
        t * x * y + s * z,
        t * x * z - s * y,
        t * x * y - s * z,
        c + t * y * y,
        t * y * z + s * x,
    ]
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Deterministic synthetic clip generator.
pub struct SynthGenerator {
    spec: SynthSpec,
    globals: Globals,
}

impl SynthGenerator {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let globals = Globals::new(&spec)?;
        Ok(SynthGenerator { spec, globals })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn partition(&self) -> &RegionPartition {
        &self.globals.partition
    }

    /// Generate clip `clip_index`. Deterministic in `(rng_seed, clip_index)`.
    pub fn synth_clip(&self, clip_index: usize) -> (MotionSequence, FeatureBundle) {
        let spec = &self.spec;
        let g = &self.globals;
        let l = spec.frames_per_clip;
        let nj = spec.joint_count;
        let fps = spec.fps;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        rng.set_stream(clip_index as u64 + 1);

        let speaker_id = clip_index % spec.n_speakers;
        let emotion_id = rng.random_range(0..N_EMOTIONS);

        // Semantic stroke placement. Probability is chosen so the expected
        // flagged fraction over the dataset matches `semantic_fraction`.
        let span_len = 15 + rng.random_range(0..8); // 15..=22 frames
        let p_trigger =
            (spec.semantic_fraction * l as f64 / 18.5).clamp(0.0, 1.0);
        let has_stroke = spec.semantic_fraction > 0.0
            && l > span_len + 33
            && rng.random_range(0.0..1.0) < p_trigger;
        let stroke_start = if has_stroke {
            18 + rng.random_range(0..(l - span_len - 33))
        } else {
            0
        };
        let trigger_word = rng.random_range(0..spec.n_trigger_words.max(1));

        // Per-joint oscillation parameters for this clip.
        let arm: Vec<usize> = g.partition.arm_chain.clone();
        let hands: Vec<usize> = g.partition.joints_of(Region::Hand).to_vec();
        let lower: Vec<usize> = g.partition.joints_of(Region::Lower).to_vec();
        let face: Vec<usize> = g.partition.joints_of(Region::Face).to_vec();
        let spine: Vec<usize> = arm.iter().take(arm.len() / 3).cloned().collect();

        let mut phase = vec![0.0f64; nj];
        let mut detune = vec![0.0f64; nj];
        let mut amp = vec![0.0f64; nj];
        for &j in arm.iter().chain(hands.iter()) {
            phase[j] = rng.random_range(0.0..std::f64::consts::TAU);
            detune[j] = rng.random_range(-0.08..0.08);
            amp[j] = if spine.contains(&j) {
                0.5 + rng.random_range(0.0..0.2)
            } else if hands.contains(&j) {
                0.12 + rng.random_range(0.0..0.05)
            } else {
                0.3 + rng.random_range(0.0..0.15)
            };
        }
        // Per-joint stroke gain: the template time course is shared.
        let mut stroke_gain = vec![0.0f64; nj];
        for &j in arm.iter().chain(hands.iter()) {
            stroke_gain[j] = 0.4 + rng.random_range(0.0..0.3);
        }

        // Random-walk phase jitter, independent per arm joint.
        let jitter_sd = 0.08;
        let mut jitter = Array2::<f64>::zeros((l, nj));
        for &j in &arm {
            if spine.contains(&j) {
                continue; // spine stays smooth and predictable
            }
            let mut acc = 0.0;
            for t in 0..l {
                let z: f64 = StandardNormal.sample(&mut rng);
                acc += z * jitter_sd;
                jitter[[t, j]] = acc;
            }
        }

        // Stroke template: three harmonics around the semantic frequency with
        // word-keyed phases, under a Hann envelope.
        let tp = g.trigger_phase.row(trigger_word);
        let stroke_env = |t: usize| -> f64 {
            if !has_stroke || t < stroke_start || t >= stroke_start + span_len {
                return 0.0;
            }
            let u = (t - stroke_start) as f64 / (span_len - 1) as f64;
            0.5 - 0.5 * (std::f64::consts::TAU * u).cos()
        };
        let stroke_course = |t: usize| -> f64 {
            let tt = (t as f64 - stroke_start as f64) / fps;
            let f = spec.semantic_freq_hz;
            (std::f64::consts::TAU * f * 0.7 * tt + tp[0]).sin()
                + 0.8 * (std::f64::consts::TAU * f * tt + tp[1]).sin()
                + 0.6 * (std::f64::consts::TAU * f * 1.35 * tt + tp[2]).sin()
        };

        // Angles per (frame, joint), then exact rotations.
        let mut angles = Array2::<f64>::zeros((l, nj));
        for t in 0..l {
            let tt = t as f64 / fps;
            let damp = (-0.25 * tt).exp();
            let env = stroke_env(t);
            for j in 0..nj {
                let base = g.base_angle[[speaker_id, j]];
                let mut a = base;
                if arm.contains(&j) || hands.contains(&j) {
                    let f_pos = if spine.contains(&j) {
                        spec.beat_freq_hz / 4.0
                    } else {
                        spec.beat_freq_hz / 2.0 * (1.0 + detune[j])
                    };
                    let beat = amp[j]
                        * damp
                        * (std::f64::consts::TAU * f_pos * tt + phase[j] + jitter[[t, j]]).sin();
                    let stroke = stroke_gain[j] * stroke_course(t);
                    a += (1.0 - env) * beat + env * stroke;
                } else if lower.contains(&j) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    a += spec.noise_level * z;
                } else if face.contains(&j) {
                    a += 0.05 * (std::f64::consts::TAU * 2.0 * tt + phase.first().copied().unwrap_or(0.0)).sin();
                }
                angles[[t, j]] = a;
            }
        }

        let mut frames = Array3::<f64>::zeros((l, nj, 6));
        for t in 0..l {
            for j in 0..nj {
                let axis = [
                    g.joint_axis[[j, 0]],
                    g.joint_axis[[j, 1]],
                    g.joint_axis[[j, 2]],
                ];
                let r6 = axis_angle_rot6d(axis, angles[[t, j]]);
                for c in 0..6 {
                    frames[[t, j, c]] = round_f32(r6[c]);
                }
            }
        }

        // Word spans: tile the clip; the stroke span carries the trigger word.
        let mut word_spans = Vec::new();
        let mut semantic_flags = vec![0u8; l];
        if has_stroke {
            for t in stroke_start..stroke_start + span_len {
                semantic_flags[t] = 1;
            }
        }
        let mut cursor = 0usize;
        while cursor < l {
            if has_stroke && cursor <= stroke_start && stroke_start < cursor + 8 {
                // gap until the stroke, then the trigger word span
                word_spans.push(WordSpan {
                    start: stroke_start,
                    end: stroke_start + span_len,
                    word_id: trigger_word,
                });
                cursor = stroke_start + span_len + rng.random_range(2..6);
                continue;
            }
            let len = 8 + rng.random_range(0..7);
            let end = (cursor + len).min(l);
            if has_stroke && cursor < stroke_start && end > stroke_start {
                // stop the filler word right before the stroke
                if stroke_start > cursor + 2 {
                    word_spans.push(WordSpan {
                        start: cursor,
                        end: stroke_start,
                        word_id: spec.n_trigger_words
                            + rng.random_range(0..(spec.n_words - spec.n_trigger_words)),
                    });
                }
                cursor = stroke_start;
                continue;
            }
            word_spans.push(WordSpan {
                start: cursor,
                end,
                word_id: spec.n_trigger_words
                    + rng.random_range(0..(spec.n_words - spec.n_trigger_words)),
            });
            cursor = end + rng.random_range(2..6);
        }

        // Word embedding track: the embedding of the covering word, else zero.
        let mut e_s = Array2::<f64>::zeros((l, spec.word_dim));
        for span in &word_spans {
            for t in span.start..span.end.min(l) {
                for d in 0..spec.word_dim {
                    e_s[[t, d]] = round_f32(g.word_embeddings[[span.word_id, d]]);
                }
            }
        }

        // Audio features: envelope of arm speed plus a beat-locked pulse
        // train, projected onto two fixed directions.
        let mut speed_env = vec![0.0f64; l];
        for t in 1..l {
            let mut s = 0.0;
            for &j in &arm {
                s += (angles[[t, j]] - angles[[t - 1, j]]).abs();
            }
            speed_env[t] = s * fps / arm.len() as f64;
        }
        speed_env[0] = speed_env[1.min(l - 1)];
        let mut smooth = vec![0.0f64; l];
        for t in 0..l {
            let lo = t.saturating_sub(1);
            let hi = (t + 2).min(l);
            smooth[t] = speed_env[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        let clip_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut e_a = Array2::<f64>::zeros((l, spec.audio_dim));
        for t in 0..l {
            let tt = t as f64 / fps;
            let pulse = (std::f64::consts::TAU * spec.beat_freq_hz * tt + clip_phase)
                .cos()
                .max(0.0)
                .powi(4);
            for d in 0..spec.audio_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                e_a[[t, d]] = round_f32(
                    smooth[t] * g.audio_basis[[0, d]] + pulse * g.audio_basis[[1, d]] + 0.01 * z,
                );
            }
        }

        let e_m = Array1::from_iter(
            g.speaker_style
                .row(speaker_id)
                .iter()
                .map(|&x| round_f32(x)),
        );
        let e_eps = Array1::from_iter(
            g.emotion_style
                .row(emotion_id)
                .iter()
                .map(|&x| round_f32(x)),
        );

        let seed_pose = frames.slice(ndarray::s![0..4, .., ..]).to_owned();

        let seq = MotionSequence {
            frames,
            fps,
            partition: g.partition.clone(),
            semantic_flags,
            speaker_id,
            emotion_id,
            word_spans,
        };
        let features = FeatureBundle {
            e_a,
            e_s,
            e_m,
            e_eps,
            speaker_id,
            seed_pose,
        };
        (seq, features)
    }

    /// Generate the whole dataset described by the spec.
    pub fn dataset(&self) -> Vec<(MotionSequence, FeatureBundle)> {
        (0..self.spec.n_clips).map(|i| self.synth_clip(i)).collect()
    }
}

/// One-shot convenience wrapper.
pub fn synth_clip(spec: &SynthSpec, clip_index: usize) -> Result<(MotionSequence, FeatureBundle)> {
    Ok(SynthGenerator::new(spec.clone())?.synth_clip(clip_index))
}

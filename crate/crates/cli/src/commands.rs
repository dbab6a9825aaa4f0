//! Command implementations behind the CLI surface.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cospeech_core::analysis::{
    self, duration_weighted_mean, hier_bootstrap, matched_sample, segment_windows, AnalysisWindow,
    BootstrapResult, SpectralParams, WindowClass,
};
use cospeech_core::datagen::SynthGenerator;
use cospeech_core::gate::GateMode;
use cospeech_core::metrics::{beat_alignment, diversity_l1, frechet, MotionFeaturizer};
use cospeech_core::model::Stage2Model;
use cospeech_core::objectives::{lr_at_epoch, train, TrainOptions};
use cospeech_core::rvq::pretrain_codecs;
use cospeech_core::{FeatureBundle, MotionSequence};

use crate::archive::{self, clip_dir_name, list_clips, read_archive, write_archive};
use crate::cfgfile::{self, config_hash};
use crate::checkpoint;
use crate::error::{CliError, Result};
use crate::runlog::{EpochRecord, RunHeader, RunLog};

fn load_dataset(dir: &Path) -> Result<Vec<(MotionSequence, FeatureBundle)>> {
    let clips = list_clips(dir).map_err(|e| CliError::Data(e.to_string()))?;
    if clips.is_empty() {
        return Err(CliError::Data(format!(
            "no clip_* directories under {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(clips.len());
    for path in clips {
        out.push(read_archive(&path).map_err(|e| CliError::Data(e.to_string()))?);
    }
    Ok(out)
}

fn check_dims(cfg: &cospeech_core::ModelConfig, feat: &FeatureBundle) -> Result<()> {
    if feat.e_a.ncols() != cfg.audio_dim
        || feat.e_s.ncols() != cfg.word_dim
        || feat.e_m.len() != cfg.style_dim
    {
        return Err(CliError::Config(format!(
            "config dims (audio {}, word {}, style {}) do not match dataset \
             (audio {}, word {}, style {}); adjust the [model] section",
            cfg.audio_dim,
            cfg.word_dim,
            cfg.style_dim,
            feat.e_a.ncols(),
            feat.e_s.ncols(),
            feat.e_m.len(),
        )));
    }
    Ok(())
}

/// `synth`: generate a synthetic dataset of clip archives.
pub fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = cfgfile::load(config)?;
    let mut spec = cfg.synth;
    if let Some(seed) = seed {
        spec.rng_seed = seed;
    }
    let gen = SynthGenerator::new(spec.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    for i in 0..spec.n_clips {
        let (seq, feat) = gen.synth_clip(i);
        write_archive(&out.join(clip_dir_name(i)), &seq, &feat)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let spec_json =
        serde_json::to_string_pretty(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(out.join("synth_spec.json"), spec_json)?;
    println!(
        "wrote {} clips (J={}, L={}, fps={}) to {}",
        spec.n_clips,
        spec.joint_count,
        spec.frames_per_clip,
        spec.fps,
        out.display()
    );
    Ok(())
}

/// `pretrain-codec`: train and freeze the Stage-1 tokenizer.
pub fn cmd_pretrain(
    data: &Path,
    config: &Path,
    out: &Path,
    steps: Option<usize>,
    seed: u64,
) -> Result<()> {
    let cfg = cfgfile::load(config)?;
    let dataset = load_dataset(data)?;
    check_dims(&cfg.model, &dataset[0].1)?;
    let steps = steps.or(cfg.train.codec_steps).unwrap_or(300);
    let set = pretrain_codecs(&dataset, &cfg.model, steps, seed)?;
    checkpoint::save_codec(out, &cfg.model, &set)?;
    println!(
        "pretrained {} codecs for {} steps; checkpoint at {}",
        set.codecs.len(),
        steps,
        out.display()
    );
    Ok(())
}

/// `train`: Stage-2 training against a frozen codec checkpoint.
pub fn cmd_train(
    data: &Path,
    codec: &Path,
    config: &Path,
    out: &Path,
    seed: u64,
    beta_phys: Option<f64>,
) -> Result<()> {
    let cfg = cfgfile::load(config)?;
    let mut model_cfg = cfg.model;
    let mut disable_ibp = false;
    if let Some(v) = beta_phys {
        if v < 0.0 {
            return Err(CliError::Config("--beta-phys must be >= 0".into()));
        }
        if v == 0.0 {
            disable_ibp = true;
        } else {
            model_cfg.beta_phys_target = v;
        }
    }
    let (codec_cfg, partition, set) = checkpoint::load_codec(codec)?;
    for (name, a, b) in [
        ("cond_dim", codec_cfg.cond_dim, model_cfg.cond_dim),
        ("codebook_size", codec_cfg.codebook_size, model_cfg.codebook_size),
        ("rvq_levels", codec_cfg.rvq_levels, model_cfg.rvq_levels),
        ("latent_rate_body", codec_cfg.latent_rate_body, model_cfg.latent_rate_body),
        ("latent_rate_face", codec_cfg.latent_rate_face, model_cfg.latent_rate_face),
    ] {
        if a != b {
            return Err(CliError::Config(format!(
                "codec checkpoint {name}={a} conflicts with training config {name}={b}"
            )));
        }
    }
    let dataset = load_dataset(data)?;
    check_dims(&model_cfg, &dataset[0].1)?;
    let mut model = Stage2Model::new(model_cfg.clone(), partition, &set, seed)?;
    let clips: Vec<_> = dataset
        .iter()
        .map(|(m, f)| model.prepare_clip(m, f))
        .collect::<cospeech_core::Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut log = RunLog::create(
        &out.join("runlog.jsonl"),
        &RunHeader {
            config_hash: config_hash(&model_cfg),
            seed,
            clips: clips.len(),
        },
    )?;
    let opts = TrainOptions {
        seed,
        disable_ibp,
    };
    let total_epochs = model_cfg.epochs;
    let base_lr = model_cfg.lr;
    let decay = model_cfg.lr_decay;
    let mut log_err = None;
    train(&mut model, &clips, &opts, |epoch, breakdown| {
        let record = EpochRecord {
            epoch,
            lr: lr_at_epoch(base_lr, decay, epoch, total_epochs),
            losses: *breakdown,
        };
        if let Err(e) = log.record(&record) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    checkpoint::save_model(&out.join("checkpoint"), &model)?;
    println!(
        "trained {} epochs on {} clips; checkpoint at {}",
        total_epochs,
        clips.len(),
        out.join("checkpoint").display()
    );
    Ok(())
}

/// `generate`: run the model on one clip's features, write motion and the
/// gate trace as a clip archive with extra arrays.
pub fn cmd_generate(ckpt: &Path, clip: &Path, out: &Path, sampled: bool, seed: u64) -> Result<()> {
    let model = checkpoint::load_model(ckpt)?;
    let (source, feat) = read_archive(clip).map_err(|e| CliError::Data(e.to_string()))?;
    check_dims(&model.cfg, &feat)?;
    let mode = if sampled {
        GateMode::Sampled
    } else {
        GateMode::Deterministic
    };
    let generation = model.generate(&feat, source.fps, mode, seed)?;
    write_archive(out, &generation.motion, &feat).map_err(|e| CliError::Data(e.to_string()))?;
    let trace = &generation.trace;
    let l = trace.psi.len();
    let z = trace.mu.ncols();
    for (name, dims, data) in [
        ("gate_psi", vec![l], trace.psi.clone()),
        ("gate_mu", vec![l, z], trace.mu.iter().cloned().collect()),
        (
            "gate_logvar",
            vec![l, z],
            trace.logvar.iter().cloned().collect(),
        ),
        ("gate_z", vec![l, z], trace.z.iter().cloned().collect()),
        (
            "gate_timing",
            vec![l, trace.timing.ncols()],
            trace.timing.iter().cloned().collect(),
        ),
    ] {
        archive::append_array(out, name, &dims, &data)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    println!(
        "generated {} frames ({} mode) into {}",
        l,
        if sampled { "sampled" } else { "deterministic" },
        out.display()
    );
    Ok(())
}

/// `gate-dump`: per-frame gate probabilities next to ground-truth flags.
pub fn cmd_gate_dump(ckpt: &Path, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let model = checkpoint::load_model(ckpt)?;
    let dataset = load_dataset(data)?;
    check_dims(&model.cfg, &dataset[0].1)?;
    let mut file = fs::File::create(out)?;
    writeln!(file, "clip,frame,psi,flag")?;
    for (clip_idx, (seq, feat)) in dataset.iter().enumerate() {
        let trace = model.infer_gate(feat, GateMode::Deterministic, seed);
        for (t, (&psi, &flag)) in trace.psi.iter().zip(seq.semantic_flags.iter()).enumerate() {
            writeln!(file, "{clip_idx},{t},{psi},{flag}")?;
        }
    }
    println!("gate dump for {} clips at {}", dataset.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CiStat {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub reliable: bool,
}

impl From<BootstrapResult> for CiStat {
    fn from(r: BootstrapResult) -> Self {
        CiStat {
            point: r.point,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            reliable: r.reliable,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub windows: usize,
    pub total_frames: usize,
    pub peak_hz: CiStat,
    pub half_bandwidth_hz: CiStat,
    pub prominence: CiStat,
    pub plv: CiStat,
    pub oscillator_r2: CiStat,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub bootstrap_replicates: usize,
    pub matched_windows: usize,
    pub skipped_speakers: Vec<usize>,
    pub classes: BTreeMap<String, ClassReport>,
    pub delta_r2_arm_core_vs_shoulder: CiStat,
    pub delta_r2_all_vs_shoulder: CiStat,
}

type WindowKey = (usize, usize, u8);

fn window_key(w: &AnalysisWindow) -> WindowKey {
    (w.clip_id, w.start_frame, matches!(w.class, WindowClass::Semantic) as u8)
}

fn cached(
    windows: &[AnalysisWindow],
    f: impl Fn(&AnalysisWindow) -> Option<f64>,
) -> BTreeMap<WindowKey, Option<f64>> {
    windows.iter().map(|w| (window_key(w), f(w))).collect()
}

fn boot_stat(
    windows: &[AnalysisWindow],
    cache: &BTreeMap<WindowKey, Option<f64>>,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BootstrapResult> {
    let stat = |ws: &[&AnalysisWindow]| duration_weighted_mean(ws, &|w| cache[&window_key(w)]);
    hier_bootstrap(&stat, windows, b, rng).map_err(CliError::from)
}

/// `analyze`: matched-window kinematic report with bootstrap CIs.
pub fn cmd_analyze(
    data: &Path,
    out: &Path,
    seed: u64,
    bootstrap: usize,
    psd_out: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let partition = dataset[0].0.partition.clone();
    let mut windows = Vec::new();
    for (clip_id, (seq, _)) in dataset.iter().enumerate() {
        windows.extend(segment_windows(seq, clip_id));
    }
    if windows.is_empty() {
        return Err(CliError::Data(
            "no analysis windows of at least 15 frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matched = matched_sample(&windows, &mut rng);
    // A beat-only dataset has no semantic windows to match against; fall
    // back to the full window set so spectral audits still run.
    let pool = if matched.windows.is_empty() {
        windows.clone()
    } else {
        matched.windows.clone()
    };
    let params = SpectralParams::default();
    let shoulder = partition.shoulder;
    let forearm = partition.forearm;
    let arm_chain = partition.arm_chain.clone();
    let all_joints: Vec<usize> = (0..partition.joint_count).collect();

    let mut classes = BTreeMap::new();
    for (name, class) in [("beat", WindowClass::Beat), ("semantic", WindowClass::Semantic)] {
        let class_windows: Vec<AnalysisWindow> =
            pool.iter().filter(|w| w.class == class).cloned().collect();
        if class_windows.is_empty() {
            continue;
        }
        let peak_cache = cached(&class_windows, |w| {
            analysis::psd_stats_window(w, shoulder, params).ok().map(|s| s.peak_hz)
        });
        let bw_cache = cached(&class_windows, |w| {
            analysis::psd_stats_window(w, shoulder, params)
                .ok()
                .map(|s| s.half_bandwidth_hz)
        });
        let prom_cache = cached(&class_windows, |w| {
            analysis::psd_stats_window(w, shoulder, params)
                .ok()
                .map(|s| s.prominence)
        });
        let plv_cache = cached(&class_windows, |w| {
            analysis::plv_window(w, shoulder, forearm).ok()
        });
        let r2_cache = cached(&class_windows, |w| {
            analysis::oscillator_r2_window(w, &arm_chain).ok()
        });
        let report = ClassReport {
            windows: class_windows.len(),
            total_frames: class_windows.iter().map(|w| w.duration_frames()).sum(),
            peak_hz: boot_stat(&class_windows, &peak_cache, bootstrap, &mut rng)?.into(),
            half_bandwidth_hz: boot_stat(&class_windows, &bw_cache, bootstrap, &mut rng)?.into(),
            prominence: boot_stat(&class_windows, &prom_cache, bootstrap, &mut rng)?.into(),
            plv: boot_stat(&class_windows, &plv_cache, bootstrap, &mut rng)?.into(),
            oscillator_r2: boot_stat(&class_windows, &r2_cache, bootstrap, &mut rng)?.into(),
        };
        classes.insert(name.to_string(), report);
    }

    let beat_windows: Vec<AnalysisWindow> = pool
        .iter()
        .filter(|w| w.class == WindowClass::Beat)
        .cloned()
        .collect();
    if beat_windows.is_empty() {
        return Err(CliError::Data("no beat windows to analyze".into()));
    }
    let coherent_cache = cached(&beat_windows, |w| {
        analysis::delta_r2(w, &[shoulder], &arm_chain).ok()
    });
    let all_cache = cached(&beat_windows, |w| {
        analysis::delta_r2(w, &[shoulder], &all_joints).ok()
    });
    let report = AnalysisReport {
        seed,
        bootstrap_replicates: bootstrap,
        matched_windows: pool.len(),
        skipped_speakers: matched.skipped_speakers,
        classes,
        delta_r2_arm_core_vs_shoulder: boot_stat(&beat_windows, &coherent_cache, bootstrap, &mut rng)?
            .into(),
        delta_r2_all_vs_shoulder: boot_stat(&beat_windows, &all_cache, bootstrap, &mut rng)?.into(),
    };
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(out, json)?;

    if let Some(psd_path) = psd_out {
        write_psd_decay(psd_path, &pool, shoulder, params)?;
    }
    println!(
        "analyzed {} windows ({} matched) into {}",
        windows.len(),
        pool.len(),
        out.display()
    );
    Ok(())
}

/// Mean normalized PSD as a function of frequency offset from each window's
/// peak, per class, on a fixed grid. Tab-separated numeric table.
fn write_psd_decay(
    path: &Path,
    windows: &[AnalysisWindow],
    shoulder: usize,
    params: SpectralParams,
) -> Result<()> {
    let grid: Vec<f64> = (-12..=12).map(|i| i as f64 * 0.25).collect();
    let mut sums = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for class in ["beat", "semantic"] {
        sums.insert(class, vec![0.0f64; grid.len()]);
        counts.insert(class, vec![0usize; grid.len()]);
    }
    for w in windows {
        let class = match w.class {
            WindowClass::Beat => "beat",
            WindowClass::Semantic => "semantic",
        };
        let speed = w.joint_speed(shoulder);
        let (freqs, psd) = analysis::welch_psd(&speed, w.fps, params.nperseg.min(speed.len()));
        let stats = match analysis::psd_stats(&speed, w.fps, params) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let peak_power = psd
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
            .max(1e-300);
        for (gi, &off) in grid.iter().enumerate() {
            let f = stats.peak_hz + off;
            if f < 0.0 || f > freqs[freqs.len() - 1] {
                continue;
            }
            // linear interpolation on the PSD
            let pos = f / (freqs[1] - freqs[0]);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(freqs.len() - 1);
            let frac = pos - lo as f64;
            let v = psd[lo] * (1.0 - frac) + psd[hi] * frac;
            sums.get_mut(class).unwrap()[gi] += v / peak_power;
            counts.get_mut(class).unwrap()[gi] += 1;
        }
    }
    let mut file = fs::File::create(path)?;
    writeln!(file, "offset_hz\tbeat\tsemantic")?;
    for (gi, &off) in grid.iter().enumerate() {
        let beat = if counts["beat"][gi] > 0 {
            sums["beat"][gi] / counts["beat"][gi] as f64
        } else {
            f64::NAN
        };
        let sem = if counts["semantic"][gi] > 0 {
            sums["semantic"][gi] / counts["semantic"][gi] as f64
        } else {
            f64::NAN
        };
        writeln!(file, "{off}\t{beat}\t{sem}")?;
    }
    Ok(())
}

/// Audio onset times from the positive first difference of the feature-row
/// norm: local peaks above mean + one standard deviation.
pub fn onsets_from_audio(e_a: &Array2<f64>, fps: f64) -> Vec<f64> {
    let l = e_a.nrows();
    let norms: Vec<f64> = (0..l)
        .map(|t| e_a.row(t).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut diff = vec![0.0; l];
    for t in 1..l {
        diff[t] = (norms[t] - norms[t - 1]).max(0.0);
    }
    let mean = diff.iter().sum::<f64>() / l as f64;
    let var = diff.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / l as f64;
    let thr = mean + var.sqrt();
    let mut onsets = Vec::new();
    for t in 1..l.saturating_sub(1) {
        if diff[t] > thr && diff[t] >= diff[t - 1] && diff[t] >= diff[t + 1] {
            onsets.push(t as f64 / fps);
        }
    }
    onsets
}

#[derive(Debug, Clone, Serialize)]
struct MetricRecord<'a> {
    metric: &'a str,
    value: f64,
    config_hash: &'a str,
}

/// `metrics`: Fréchet gesture distance, diversity, beat alignment between a
/// reference set and a generated set of clip archives.
pub fn cmd_metrics(real: &Path, generated: &Path, out: &Path, seed: u64) -> Result<()> {
    let real_set = load_dataset(real)?;
    let gen_set = load_dataset(generated)?;
    let real_motions: Vec<MotionSequence> = real_set.iter().map(|(m, _)| m.clone()).collect();
    let gen_motions: Vec<MotionSequence> = gen_set.iter().map(|(m, _)| m.clone()).collect();
    // The featurizer is trained on the reference set only.
    let featurizer = MotionFeaturizer::train(&real_motions, 16, seed, 150)?;
    let emb_real = featurizer.embed_set(&real_motions);
    let emb_gen = featurizer.embed_set(&gen_motions);
    let fgd = frechet(&emb_real, &emb_gen)?;
    let div_real = diversity_l1(
        &real_motions.iter().map(|m| m.frames.clone()).collect::<Vec<_>>(),
    )?;
    let div_gen = diversity_l1(
        &gen_motions.iter().map(|m| m.frames.clone()).collect::<Vec<_>>(),
    )?;
    let mut ba_total = 0.0;
    let mut ba_count = 0usize;
    for (motion, feat) in &gen_set {
        let onsets = onsets_from_audio(&feat.e_a, motion.fps);
        if onsets.is_empty() {
            continue;
        }
        ba_total += beat_alignment(&onsets, motion)?;
        ba_count += 1;
    }
    let ba = if ba_count > 0 {
        ba_total / ba_count as f64
    } else {
        f64::NAN
    };
    let hash = format!("{seed:016x}");
    let mut file = fs::File::create(out)?;
    for (metric, value) in [
        ("fgd", fgd),
        ("diversity_real", div_real),
        ("diversity_gen", div_gen),
        ("beat_alignment", ba),
    ] {
        let record = MetricRecord {
            metric,
            value,
            config_hash: &hash,
        };
        writeln!(
            file,
            "{}",
            serde_json::to_string(&record).map_err(|e| CliError::Data(e.to_string()))?
        )?;
    }
    println!(
        "metrics over {} real / {} generated clips at {}",
        real_set.len(),
        gen_set.len(),
        out.display()
    );
    Ok(())
}

//! Kinematic analysis toolkit: matched window sampling, Welch spectral
//! statistics, phase-locking, inertial-oscillator fit, and hierarchical
//! bootstrap confidence intervals.
//!
//! Defaults (all exposed as parameters): analysis band 0.2–6 Hz, Welch
//! segments of min(64, window) samples with 50% overlap, Hann window and
//! per-segment mean removal; the phase-locking band-pass is 0.5–3 Hz via a
//! frequency-domain analytic signal.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};
use crate::motion::MotionSequence;

/// Minimum analysis window length in frames.
pub const MIN_WINDOW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowClass {
    Beat,
    Semantic,
}

/// A contiguous single-class span of motion with lineage for the
/// hierarchical bootstrap.
#[derive(Debug, Clone)]
pub struct AnalysisWindow {
    pub frames: Array3<f64>,
    pub fps: f64,
    pub class: WindowClass,
    pub speaker_id: usize,
    pub clip_id: usize,
    pub start_frame: usize,
}

impl AnalysisWindow {
    pub fn duration_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Angular-speed scalar of one joint inside the window.
    pub fn joint_speed(&self, joint: usize) -> Vec<f64> {
        let l = self.duration_frames();
        let mut speed = vec![0.0; l];
        for t in 1..l {
            let mut d2 = 0.0;
            for c in 0..6 {
                let d = self.frames[[t, joint, c]] - self.frames[[t - 1, joint, c]];
                d2 += d * d;
            }
            speed[t] = d2.sqrt() * self.fps;
        }
        if l > 1 {
            speed[0] = speed[1];
        }
        speed
    }
}

/// Maximal runs of constant semantic flag, at least [`MIN_WINDOW`] frames.
pub fn segment_windows(seq: &MotionSequence, clip_id: usize) -> Vec<AnalysisWindow> {
    let l = seq.len();
    let mut out = Vec::new();
    let mut start = 0usize;
    for t in 1..=l {
        let run_ends = t == l || seq.semantic_flags[t] != seq.semantic_flags[start];
        if run_ends {
            if t - start >= MIN_WINDOW {
                out.push(AnalysisWindow {
                    frames: seq.frames.slice(ndarray::s![start..t, .., ..]).to_owned(),
                    fps: seq.fps,
                    class: if seq.semantic_flags[start] == 1 {
                        WindowClass::Semantic
                    } else {
                        WindowClass::Beat
                    },
                    speaker_id: seq.speaker_id,
                    clip_id,
                    start_frame: start,
                });
            }
            start = t;
        }
    }
    out
}

/// Class-balanced sample: per speaker, min(beat, semantic) windows drawn
/// from each class without replacement. Speakers missing a class are
/// skipped and reported.
pub struct MatchedSample {
    pub windows: Vec<AnalysisWindow>,
    pub skipped_speakers: Vec<usize>,
}

pub fn matched_sample(windows: &[AnalysisWindow], rng: &mut ChaCha8Rng) -> MatchedSample {
    let mut by_speaker: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        let entry = by_speaker.entry(w.speaker_id).or_default();
        match w.class {
            WindowClass::Beat => entry.0.push(i),
            WindowClass::Semantic => entry.1.push(i),
        }
    }
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (speaker, (beat, sem)) in by_speaker {
        if beat.is_empty() || sem.is_empty() {
            skipped.push(speaker);
            continue;
        }
        let n = beat.len().min(sem.len());
        for class_indices in [beat, sem] {
            let mut pool = class_indices;
            for k in 0..n {
                let pick = rng.random_range(0..pool.len());
                let idx = pool.swap_remove(pick);
                out.push(windows[idx].clone());
                let _ = k;
            }
        }
    }
    MatchedSample {
        windows: out,
        skipped_speakers: skipped,
    }
}

/// Welch power spectral density (one-sided). Segments of `nperseg` samples
/// with 50% overlap, Hann window, per-segment mean removal. Returns
/// (frequencies, psd).
pub fn welch_psd(signal: &[f64], fps: f64, nperseg: usize) -> (Vec<f64>, Vec<f64>) {
    let n = nperseg.min(signal.len()).max(2);
    let step = (n / 2).max(1);
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect();
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let n_freq = n / 2 + 1;
    let mut psd = vec![0.0; n_freq];
    let mut segments = 0usize;
    let mut start = 0usize;
    while start + n <= signal.len() {
        let seg = &signal[start..start + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = seg
            .iter()
            .zip(window.iter())
            .map(|(&x, &w)| Complex::new((x - mean) * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let mag2 = buf[k].norm_sqr();
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) {
                mag2
            } else {
                2.0 * mag2
            };
            *p += one_sided / (fps * win_power);
        }
        segments += 1;
        start += step;
    }
    if segments > 0 {
        for p in psd.iter_mut() {
            *p /= segments as f64;
        }
    }
    let freqs = (0..n_freq).map(|k| k as f64 * fps / n as f64).collect();
    (freqs, psd)
}

/// Spectral summary of one channel: peak frequency, half-power bandwidth,
/// and peak prominence (max/mean PSD in band).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralStats {
    pub peak_hz: f64,
    pub half_bandwidth_hz: f64,
    pub prominence: f64,
}

/// Analysis parameters with the documented defaults.
#[derive(Debug, Clone, Copy)]
pub struct SpectralParams {
    pub nperseg: usize,
    pub band: (f64, f64),
}

impl Default for SpectralParams {
    fn default() -> Self {
        SpectralParams {
            nperseg: 64,
            band: (0.2, 6.0),
        }
    }
}

pub fn psd_stats(signal: &[f64], fps: f64, params: SpectralParams) -> Result<SpectralStats> {
    if signal.len() < MIN_WINDOW {
        return Err(CoreError::TooShort {
            context: "psd_stats",
            need: MIN_WINDOW,
            got: signal.len(),
        });
    }
    let (freqs, psd) = welch_psd(signal, fps, params.nperseg);
    let (lo, hi) = params.band;
    let band_idx: Vec<usize> = (0..freqs.len())
        .filter(|&k| freqs[k] >= lo && freqs[k] <= hi)
        .collect();
    if band_idx.is_empty() {
        return Err(CoreError::Degenerate("analysis band holds no bins".into()));
    }
    let total: f64 = band_idx.iter().map(|&k| psd[k]).sum();
    // Scale-free degeneracy check: a constant signal leaves only rounding
    // residue after detrending, many orders below its own mean square.
    let sig_ms = signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64;
    if !total.is_finite() || total <= 1e-20 * sig_ms.max(1e-300) {
        return Err(CoreError::Degenerate(
            "no in-band spectral power (constant signal?)".into(),
        ));
    }
    let &peak_k = band_idx
        .iter()
        .max_by(|&&a, &&b| psd[a].partial_cmp(&psd[b]).unwrap())
        .unwrap();
    let peak_power = psd[peak_k];
    let mean_power = total / band_idx.len() as f64;
    let half = peak_power / 2.0;
    let lo_k = *band_idx.first().unwrap();
    let hi_k = *band_idx.last().unwrap();
    // Walk outward from the peak to the half-power crossings, interpolating
    // linearly; clamp at the band edges when the PSD never falls below half.
    let mut f_left = freqs[lo_k];
    let mut k = peak_k;
    while k > lo_k {
        if psd[k - 1] < half {
            let frac = (psd[k] - half) / (psd[k] - psd[k - 1]);
            f_left = freqs[k] - frac * (freqs[k] - freqs[k - 1]);
            break;
        }
        k -= 1;
    }
    let mut f_right = freqs[hi_k];
    let mut k = peak_k;
    while k < hi_k {
        if psd[k + 1] < half {
            let frac = (psd[k] - half) / (psd[k] - psd[k + 1]);
            f_right = freqs[k] + frac * (freqs[k + 1] - freqs[k]);
            break;
        }
        k += 1;
    }
    Ok(SpectralStats {
        peak_hz: freqs[peak_k],
        half_bandwidth_hz: f_right - f_left,
        prominence: peak_power / mean_power,
    })
}

/// Spectral stats of one joint's angular-speed channel.
pub fn psd_stats_window(
    window: &AnalysisWindow,
    joint: usize,
    params: SpectralParams,
) -> Result<SpectralStats> {
    psd_stats(&window.joint_speed(joint), window.fps, params)
}

/// Band-limited analytic signal via the frequency domain: keep positive
/// frequencies inside the band (doubled), zero everything else.
fn analytic_bandpass(signal: &[f64], fps: f64, band: (f64, f64)) -> Vec<Complex<f64>> {
    let n = signal.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let freq = k as f64 * fps / n as f64;
        let keep = k > 0 && k < n.div_ceil(2) && freq >= band.0 && freq <= band.1;
        *v = if keep { *v * 2.0 } else { Complex::new(0.0, 0.0) };
    }
    ifft.process(&mut buf);
    for v in buf.iter_mut() {
        *v /= n as f64;
    }
    buf
}

/// Default band-pass for phase extraction.
pub const PLV_BAND: (f64, f64) = (0.5, 3.0);

/// Phase-locking value between two channels: the magnitude of the mean
/// complex phase difference after band-passing.
pub fn plv(chan_a: &[f64], chan_b: &[f64], fps: f64, band: (f64, f64)) -> Result<f64> {
    if chan_a.len() != chan_b.len() {
        return Err(CoreError::LengthMismatch {
            a: chan_a.len(),
            b: chan_b.len(),
        });
    }
    if chan_a.len() < MIN_WINDOW {
        return Err(CoreError::TooShort {
            context: "plv",
            need: MIN_WINDOW,
            got: chan_a.len(),
        });
    }
    let aa = analytic_bandpass(chan_a, fps, band);
    let ab = analytic_bandpass(chan_b, fps, band);
    let mut acc = Complex::new(0.0, 0.0);
    for (x, y) in aa.iter().zip(ab.iter()) {
        let dphi = x.arg() - y.arg();
        acc += Complex::new(dphi.cos(), dphi.sin());
    }
    Ok((acc / chan_a.len() as f64).norm().min(1.0))
}

/// PLV of the shoulder↔forearm speed channels of a window.
pub fn plv_window(window: &AnalysisWindow, shoulder: usize, forearm: usize) -> Result<f64> {
    plv(
        &window.joint_speed(shoulder),
        &window.joint_speed(forearm),
        window.fps,
        PLV_BAND,
    )
}

/// Variance explained by the constant-velocity predictor over a joint
/// group's rot6d channels: `1 − SSE/SST`, SST about the per-channel mean.
/// Constant (zero-variance) windows are degenerate.
pub fn oscillator_r2(frames: &Array3<f64>, joints: &[usize]) -> Result<f64> {
    let l = frames.shape()[0];
    if l < 3 {
        return Err(CoreError::TooShort {
            context: "oscillator_r2",
            need: 3,
            got: l,
        });
    }
    let mut sse = 0.0;
    let mut sst = 0.0;
    for &j in joints {
        for c in 0..6 {
            let mut mean = 0.0;
            for t in 2..l {
                mean += frames[[t, j, c]];
            }
            mean /= (l - 2) as f64;
            for t in 2..l {
                let pred = 2.0 * frames[[t - 1, j, c]] - frames[[t - 2, j, c]];
                let x = frames[[t, j, c]];
                sse += (x - pred) * (x - pred);
                sst += (x - mean) * (x - mean);
            }
        }
    }
    if sst <= 0.0 {
        return Err(CoreError::Degenerate(
            "zero variance in oscillator_r2 group".into(),
        ));
    }
    Ok(1.0 - sse / sst)
}

pub fn oscillator_r2_window(window: &AnalysisWindow, joints: &[usize]) -> Result<f64> {
    oscillator_r2(&window.frames, joints)
}

/// R² gain from expanding the joint group.
pub fn delta_r2(window: &AnalysisWindow, group_small: &[usize], group_large: &[usize]) -> Result<f64> {
    Ok(oscillator_r2_window(window, group_large)? - oscillator_r2_window(window, group_small)?)
}

/// Hierarchical bootstrap over speaker → clip → window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// False when fewer than two speakers back the interval.
    pub reliable: bool,
}

/// Raw replicate values of `stat` under speaker → clip → window resampling.
/// Deterministic given the RNG.
pub fn hier_bootstrap_samples(
    stat: &dyn Fn(&[&AnalysisWindow]) -> f64,
    windows: &[AnalysisWindow],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut tree: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        tree.entry(w.speaker_id)
            .or_default()
            .entry(w.clip_id)
            .or_default()
            .push(i);
    }
    let speakers: Vec<usize> = tree.keys().cloned().collect();
    let mut replicates = Vec::with_capacity(b);
    for _ in 0..b {
        let mut sample: Vec<&AnalysisWindow> = Vec::new();
        for _ in 0..speakers.len() {
            let sp = speakers[rng.random_range(0..speakers.len())];
            let clips: Vec<&Vec<usize>> = tree[&sp].values().collect();
            for _ in 0..clips.len() {
                let clip = clips[rng.random_range(0..clips.len())];
                for _ in 0..clip.len() {
                    let wi = clip[rng.random_range(0..clip.len())];
                    sample.push(&windows[wi]);
                }
            }
        }
        replicates.push(stat(&sample));
    }
    Ok(replicates)
}

/// Resample speakers with replacement, clips within each sampled speaker,
/// then windows within each sampled clip; evaluate `stat` on each replicate
/// and report the percentile 95% interval. Deterministic given the RNG.
pub fn hier_bootstrap(
    stat: &dyn Fn(&[&AnalysisWindow]) -> f64,
    windows: &[AnalysisWindow],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BootstrapResult> {
    let n_speakers = windows
        .iter()
        .map(|w| w.speaker_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let all: Vec<&AnalysisWindow> = windows.iter().collect();
    let point = stat(&all);
    let mut replicates = hier_bootstrap_samples(stat, windows, b, rng)?;
    replicates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (replicates.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        replicates[lo] * (1.0 - frac) + replicates[hi] * frac
    };
    Ok(BootstrapResult {
        point,
        ci_low: quantile(0.025),
        ci_high: quantile(0.975),
        reliable: n_speakers >= 2,
    })
}

/// Duration-weighted mean of a per-window statistic; windows where the
/// statistic is unavailable (degenerate) are skipped.
pub fn duration_weighted_mean(
    windows: &[&AnalysisWindow],
    f: &dyn Fn(&AnalysisWindow) -> Option<f64>,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for w in windows {
        if let Some(v) = f(w) {
            let weight = w.duration_frames() as f64;
            num += weight * v;
            den += weight;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::default_region_partition;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn flag_seq(flags: Vec<u8>) -> MotionSequence {
        let l = flags.len();
        MotionSequence {
            frames: Array3::zeros((l, 12, 6)),
            fps: 30.0,
            partition: default_region_partition(12).unwrap(),
            semantic_flags: flags,
            speaker_id: 3,
            emotion_id: 0,
            word_spans: vec![],
        }
    }

    #[test]
    fn segmenting_flag_runs() {
        // 16 zeros then 16 ones: two windows.
        let mut flags = vec![0u8; 16];
        flags.extend(vec![1u8; 16]);
        let w = segment_windows(&flag_seq(flags), 7);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].class, WindowClass::Beat);
        assert_eq!(w[1].class, WindowClass::Semantic);
        assert_eq!(w[0].duration_frames(), 16);
        assert_eq!(w[1].start_frame, 16);
        assert_eq!(w[1].clip_id, 7);
        // 10 zeros: below the minimum, no windows.
        assert!(segment_windows(&flag_seq(vec![0; 10]), 0).is_empty());
        // alternating flags: all runs too short.
        let alt: Vec<u8> = (0..40).map(|t| (t % 2) as u8).collect();
        assert!(segment_windows(&flag_seq(alt), 0).is_empty());
    }

    fn mk_window(speaker: usize, clip: usize, class: WindowClass, len: usize) -> AnalysisWindow {
        AnalysisWindow {
            frames: Array3::zeros((len, 2, 6)),
            fps: 30.0,
            class,
            speaker_id: speaker,
            clip_id: clip,
            start_frame: 0,
        }
    }

    #[test]
    fn matched_sampling_balances_and_skips() {
        let mut windows = Vec::new();
        for i in 0..5 {
            windows.push(mk_window(0, i, WindowClass::Beat, 15));
        }
        for i in 0..3 {
            windows.push(mk_window(0, 10 + i, WindowClass::Semantic, 15));
        }
        // speaker 1 has no semantic windows
        windows.push(mk_window(1, 20, WindowClass::Beat, 15));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = matched_sample(&windows, &mut rng);
        assert_eq!(sample.windows.len(), 6); // 3 + 3 for speaker 0
        assert_eq!(sample.skipped_speakers, vec![1]);
        let beat = sample
            .windows
            .iter()
            .filter(|w| w.class == WindowClass::Beat)
            .count();
        assert_eq!(beat, 3);
        // deterministic given the seed
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let sample2 = matched_sample(&windows, &mut rng2);
        let ids: Vec<usize> = sample.windows.iter().map(|w| w.clip_id).collect();
        let ids2: Vec<usize> = sample2.windows.iter().map(|w| w.clip_id).collect();
        assert_eq!(ids, ids2);
    }

    #[test]
    fn welch_peak_on_pure_tone() {
        let fps = 30.0;
        let n = 450;
        let signal: Vec<f64> = (0..n)
            .map(|t| (std::f64::consts::TAU * 1.12 * t as f64 / fps).sin())
            .collect();
        let stats = psd_stats(&signal, fps, SpectralParams::default()).unwrap();
        let bin = fps / 64.0;
        assert!(
            (stats.peak_hz - 1.12).abs() <= bin,
            "peak {} vs 1.12 ± {bin}",
            stats.peak_hz
        );
        assert!(stats.prominence >= 1.0);
        // amplitude scaling does not move the peak
        let scaled: Vec<f64> = signal.iter().map(|x| 37.0 * x).collect();
        let stats2 = psd_stats(&scaled, fps, SpectralParams::default()).unwrap();
        assert_eq!(stats.peak_hz, stats2.peak_hz);
    }

    #[test]
    fn welch_white_noise_prominence_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut low = 0usize;
        let trials = 40;
        for _ in 0..trials {
            let signal: Vec<f64> = (0..600).map(|_| StandardNormal.sample(&mut rng)).collect();
            let stats = psd_stats(&signal, 30.0, SpectralParams::default()).unwrap();
            if stats.prominence < 3.0 {
                low += 1;
            }
            assert!(stats.half_bandwidth_hz > 0.0);
        }
        assert!(
            low * 100 >= trials * 95,
            "only {low}/{trials} below prominence 3"
        );
    }

    #[test]
    fn welch_dc_signal_is_degenerate() {
        let signal = vec![4.2; 200];
        assert!(matches!(
            psd_stats(&signal, 30.0, SpectralParams::default()),
            Err(CoreError::Degenerate(_))
        ));
        assert!(matches!(
            psd_stats(&signal[..10], 30.0, SpectralParams::default()),
            Err(CoreError::TooShort { .. })
        ));
    }

    #[test]
    fn plv_identities() {
        let fps = 30.0;
        let a: Vec<f64> = (0..300)
            .map(|t| (std::f64::consts::TAU * 1.5 * t as f64 / fps).sin())
            .collect();
        // identical signals
        let v = plv(&a, &a, fps, PLV_BAND).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
        // constant 90 degree offset: still perfectly locked
        let b: Vec<f64> = (0..300)
            .map(|t| {
                (std::f64::consts::TAU * 1.5 * t as f64 / fps + std::f64::consts::FRAC_PI_2).sin()
            })
            .collect();
        let v = plv(&a, &b, fps, PLV_BAND).unwrap();
        assert!((v - 1.0).abs() < 1e-2, "{v}");
        // global phase shift applied to both leaves PLV unchanged
        let shift = 0.8;
        let a2: Vec<f64> = (0..300)
            .map(|t| (std::f64::consts::TAU * 1.5 * t as f64 / fps + shift).sin())
            .collect();
        let b2: Vec<f64> = (0..300)
            .map(|t| {
                (std::f64::consts::TAU * 1.5 * t as f64 / fps + shift
                    + std::f64::consts::FRAC_PI_2)
                    .sin()
            })
            .collect();
        let v2 = plv(&a2, &b2, fps, PLV_BAND).unwrap();
        assert!((v - v2).abs() < 1e-9);
        // bounds and errors
        assert!(v >= 0.0 && v <= 1.0);
        assert!(matches!(
            plv(&a, &a[..100], fps, PLV_BAND),
            Err(CoreError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn plv_independent_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut total = 0.0;
        let trials = 100;
        for _ in 0..trials {
            let a: Vec<f64> = (0..3000).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..3000).map(|_| StandardNormal.sample(&mut rng)).collect();
            total += plv(&a, &b, 30.0, PLV_BAND).unwrap();
        }
        let mean = total / trials as f64;
        assert!(mean < 0.1, "mean PLV {mean}");
    }

    #[test]
    fn oscillator_r2_closed_forms() {
        // linear ramp: exactly 1
        let ramp = Array3::from_shape_fn((30, 2, 6), |(t, j, c)| {
            0.5 + 0.2 * t as f64 + j as f64 * 0.1 + c as f64
        });
        let r2 = oscillator_r2(&ramp, &[0, 1]).unwrap();
        assert!((r2 - 1.0).abs() < 1e-9, "{r2}");
        // slow sinusoid: > 0.9
        let slow = Array3::from_shape_fn((90, 1, 6), |(t, _, _)| {
            (std::f64::consts::TAU * 0.5 * t as f64 / 30.0).sin()
        });
        let r2 = oscillator_r2(&slow, &[0]).unwrap();
        assert!(r2 > 0.9, "{r2}");
        // constant: degenerate
        let flat = Array3::from_elem((20, 1, 6), 1.0);
        assert!(matches!(
            oscillator_r2(&flat, &[0]),
            Err(CoreError::Degenerate(_))
        ));
    }

    #[test]
    fn oscillator_r2_white_noise_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut neg = 0usize;
        let trials = 50;
        for _ in 0..trials {
            let noise = Array3::from_shape_fn((40, 1, 6), |_| StandardNormal.sample(&mut rng));
            if oscillator_r2(&noise, &[0]).unwrap() < 0.0 {
                neg += 1;
            }
        }
        assert!(neg * 100 >= trials * 95, "{neg}/{trials} negative");
    }

    #[test]
    fn delta_r2_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // joint 0: moderately predictable (sinusoid + jitter); joint 1: a
        // slow large sway, highly predictable (coherent expansion); joint 2:
        // white noise (noise expansion).
        let frames = Array3::from_shape_fn((60, 3, 6), |(t, j, _)| {
            let tt = t as f64 / 30.0;
            match j {
                0 => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (std::f64::consts::TAU * 0.9 * tt).sin() + 0.08 * z
                }
                1 => 2.0 * (std::f64::consts::TAU * 0.25 * tt).sin(),
                _ => StandardNormal.sample(&mut rng),
            }
        });
        let w = AnalysisWindow {
            frames,
            fps: 30.0,
            class: WindowClass::Beat,
            speaker_id: 0,
            clip_id: 0,
            start_frame: 0,
        };
        // identical groups: exactly zero
        assert_eq!(delta_r2(&w, &[0], &[0]).unwrap(), 0.0);
        // expanding to the highly predictable joint raises R²; expanding
        // into noise lowers it below the start
        let d_coherent = delta_r2(&w, &[0], &[0, 1]).unwrap();
        let d_noise = delta_r2(&w, &[0], &[0, 1, 2]).unwrap();
        assert!(d_coherent > 0.0, "coherent expansion lowered R²: {d_coherent}");
        assert!(d_noise < 0.0, "noise expansion raised R²: {d_noise}");
    }

    #[test]
    fn bootstrap_constant_statistic_and_single_speaker() {
        let windows: Vec<AnalysisWindow> = (0..6)
            .map(|i| mk_window(i % 3, i, WindowClass::Beat, 15))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let res = hier_bootstrap(&|_| 4.25, &windows, 200, &mut rng).unwrap();
        assert_eq!(res.point, 4.25);
        assert_eq!(res.ci_low, 4.25);
        assert_eq!(res.ci_high, 4.25);
        assert!(res.reliable);
        // single speaker: flagged unreliable
        let solo: Vec<AnalysisWindow> =
            (0..4).map(|i| mk_window(0, i, WindowClass::Beat, 15)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let res = hier_bootstrap(&|_| 1.0, &solo, 50, &mut rng).unwrap();
        assert!(!res.reliable);
    }

    #[test]
    fn bootstrap_is_deterministic_given_seed() {
        let windows: Vec<AnalysisWindow> = (0..9)
            .map(|i| {
                let mut w = mk_window(i % 3, i, WindowClass::Beat, 15 + i);
                w.frames.fill(i as f64);
                w
            })
            .collect();
        let stat = |ws: &[&AnalysisWindow]| {
            duration_weighted_mean(ws, &|w| Some(w.frames[[0, 0, 0]]))
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            hier_bootstrap(&stat, &windows, 300, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn bootstrap_gaussian_coverage() {
        // 100 meta-trials of 10 speakers x 3 clips x 4 windows of N(0,1)
        // frame values; the 95% CI for the duration-weighted mean should
        // cover 0 in at least 90% of trials.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut covered = 0usize;
        let trials = 100;
        for _ in 0..trials {
            let mut windows = Vec::new();
            for sp in 0..10 {
                for clip in 0..3 {
                    for _ in 0..4 {
                        let len = 15;
                        let frames =
                            Array3::from_shape_fn((len, 1, 6), |_| StandardNormal.sample(&mut rng));
                        windows.push(AnalysisWindow {
                            frames,
                            fps: 30.0,
                            class: WindowClass::Beat,
                            speaker_id: sp,
                            clip_id: sp * 100 + clip,
                            start_frame: 0,
                        });
                    }
                }
            }
            let stat = |ws: &[&AnalysisWindow]| {
                duration_weighted_mean(ws, &|w| Some(w.frames.mean().unwrap()))
            };
            let res = hier_bootstrap(&stat, &windows, 300, &mut rng).unwrap();
            if res.ci_low <= 0.0 && res.ci_high >= 0.0 {
                covered += 1;
            }
        }
        assert!(covered >= 90, "coverage {covered}/{trials}");
    }
}

//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Linear warmup window in epochs: zero before `start`, ramp to the target
/// on `[start, end]`, constant after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub start: usize,
    pub end: usize,
}

/// Full model + optimization configuration.
///
/// Defaults reproduce the reference architecture dimensions; [`ModelConfig::desk`]
/// is the scaled-down configuration used for fast CPU training in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    // Architecture widths.
    pub hidden_dim: usize,
    pub cond_dim: usize,
    pub timing_dim: usize,
    pub bottleneck_dim: usize,
    pub codebook_size: usize,
    pub rvq_levels: usize,
    pub latent_rate_body: usize,
    pub latent_rate_face: usize,
    pub heads: usize,
    pub audio_xattn_layers: usize,
    pub face_layers: usize,

    // Input feature dimensions.
    pub audio_dim: usize,
    pub word_dim: usize,
    pub style_dim: usize,
    pub n_speakers: usize,
    pub n_seed_frames: usize,

    // Optimization.
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,

    // Objective weights and schedules.
    pub beta_target: f64,
    pub kl_warmup: Warmup,
    pub lambda_fb: f64,
    pub rho: f64,
    pub phys_warmup: Warmup,
    pub beta_phys_target: f64,
    pub tau_base: f64,
    pub alpha_ibp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 768,
            cond_dim: 256,
            timing_dim: 64,
            bottleneck_dim: 16,
            codebook_size: 256,
            rvq_levels: 4,
            latent_rate_body: 2,
            latent_rate_face: 4,
            heads: 4,
            audio_xattn_layers: 8,
            face_layers: 4,
            audio_dim: 1024,
            word_dim: 300,
            style_dim: 256,
            n_speakers: 25,
            n_seed_frames: 4,
            lr: 1e-4,
            lr_decay: 0.3,
            epochs: 200,
            batch: 256,
            beta_target: 0.01,
            kl_warmup: Warmup {
                start: 20,
                end: 100,
            },
            lambda_fb: 0.5,
            rho: 3.0,
            phys_warmup: Warmup { start: 30, end: 80 },
            beta_phys_target: 0.01,
            tau_base: 0.5,
            alpha_ibp: 1.0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: same formulas and contracts, small widths,
    /// compressed warmup schedules, and a learning rate suited to small
    /// batches, so CPU training finishes in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            hidden_dim: 64,
            cond_dim: 32,
            timing_dim: 16,
            codebook_size: 32,
            audio_xattn_layers: 2,
            face_layers: 1,
            audio_dim: 64,
            word_dim: 24,
            style_dim: 16,
            n_speakers: 8,
            lr: 1e-3,
            epochs: 40,
            batch: 8,
            kl_warmup: Warmup { start: 4, end: 20 },
            phys_warmup: Warmup { start: 6, end: 16 },
            ..ModelConfig::default()
        }
    }

    /// Feed-forward width for transformer blocks at model width `d`.
    pub fn ff_dim(d: usize) -> usize {
        2 * d
    }

    pub fn validate(&self) -> Result<()> {
        fn pos(name: &str, v: f64) -> Result<()> {
            if v > 0.0 {
                Ok(())
            } else {
                Err(CoreError::InvalidConfig(format!("{name} must be positive")))
            }
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("cond_dim", self.cond_dim),
            ("timing_dim", self.timing_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("codebook_size", self.codebook_size),
            ("rvq_levels", self.rvq_levels),
            ("latent_rate_body", self.latent_rate_body),
            ("latent_rate_face", self.latent_rate_face),
            ("heads", self.heads),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("n_speakers", self.n_speakers),
        ] {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        pos("lr", self.lr)?;
        pos("lr_decay", self.lr_decay)?;
        pos("beta_target", self.beta_target)?;
        pos("beta_phys_target", self.beta_phys_target)?;
        pos("tau_base", self.tau_base)?;
        pos("rho", self.rho)?;
        pos("alpha_ibp", self.alpha_ibp)?;
        if self.lambda_fb < 0.0 {
            return Err(CoreError::InvalidConfig(
                "lambda_fb must be nonnegative".into(),
            ));
        }
        for (name, w) in [("kl_warmup", self.kl_warmup), ("phys_warmup", self.phys_warmup)] {
            if w.start >= w.end {
                return Err(CoreError::InvalidConfig(format!(
                    "{name}: start {} must be before end {}",
                    w.start, w.end
                )));
            }
        }
        if self.hidden_dim % self.heads != 0 || self.cond_dim % self.heads != 0 {
            return Err(CoreError::InvalidConfig(
                "heads must divide hidden_dim and cond_dim".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_desk_configs_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn inverted_warmup_rejected() {
        let cfg = ModelConfig {
            kl_warmup: Warmup { start: 50, end: 50 },
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serde_round_trip_is_identical() {
        let cfg = ModelConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}

//! TOML configuration files.
//!
//! ```toml
//! preset = "desk"          # or "reference"; desk is the default
//!
//! [model]                  # any ModelConfig field, overrides the preset
//! epochs = 40
//! batch = 8
//!
//! [synth]                  # any SynthSpec field
//! n_clips = 200
//! rng_seed = 7
//!
//! [train]
//! codec_steps = 300        # Stage-1 pretraining steps
//! ```

use std::path::Path;

use serde::Deserialize;

use cospeech_core::config::ModelConfig;
use cospeech_core::datagen::SynthSpec;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub codec_steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub synth: SynthSpec,
    pub train: TrainSection,
}

fn merge_tables(base: &mut toml::Value, overlay: &toml::Value) {
    if let (toml::Value::Table(b), toml::Value::Table(o)) = (base, overlay) {
        for (k, v) in o {
            match b.get_mut(k) {
                Some(slot) if slot.is_table() && v.is_table() => merge_tables(slot, v),
                _ => {
                    b.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

/// Parse a config file. The `preset` key selects the base model config
/// ("desk" by default, "reference" for the full-size architecture); the
/// `[model]` table overrides individual fields on top of it.
pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<FileConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("TOML parse error: {e}")))?;
    for key in table.keys() {
        if !matches!(key.as_str(), "preset" | "model" | "synth" | "train") {
            return Err(CliError::Config(format!("unknown config section `{key}`")));
        }
    }
    let preset = match table.get("preset").and_then(|v| v.as_str()) {
        None | Some("desk") => ModelConfig::desk(),
        Some("reference") => ModelConfig::default(),
        Some(other) => {
            return Err(CliError::Config(format!(
                "unknown preset `{other}` (expected desk or reference)"
            )))
        }
    };
    let model = match table.get("model") {
        None => preset,
        Some(overlay) => {
            let mut base = toml::Value::try_from(&preset)
                .map_err(|e| CliError::Config(e.to_string()))?;
            merge_tables(&mut base, overlay);
            base.try_into()
                .map_err(|e| CliError::Config(format!("[model]: {e}")))?
        }
    };
    let synth: SynthSpec = match table.get("synth") {
        None => SynthSpec::default(),
        Some(overlay) => {
            let mut base = toml::Value::try_from(SynthSpec::default())
                .map_err(|e| CliError::Config(e.to_string()))?;
            merge_tables(&mut base, overlay);
            base.try_into()
                .map_err(|e| CliError::Config(format!("[synth]: {e}")))?
        }
    };
    let train: TrainSection = match table.get("train") {
        None => TrainSection::default(),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| CliError::Config(format!("[train]: {e}")))?,
    };
    model
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    synth
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(FileConfig {
        model,
        synth,
        train,
    })
}

/// Short stable hash of the model config for run provenance.
pub fn config_hash(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::new();
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_desk_preset() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.model, ModelConfig::desk());
        assert_eq!(cfg.synth, SynthSpec::default());
    }

    #[test]
    fn model_overrides_apply_on_preset() {
        let cfg = parse(
            "preset = \"desk\"\n[model]\nepochs = 7\nbatch = 4\n[synth]\nn_clips = 11\n",
        )
        .unwrap();
        assert_eq!(cfg.model.epochs, 7);
        assert_eq!(cfg.model.batch, 4);
        assert_eq!(cfg.model.hidden_dim, ModelConfig::desk().hidden_dim);
        assert_eq!(cfg.synth.n_clips, 11);
    }

    #[test]
    fn reference_preset_selects_full_dims() {
        let cfg = parse("preset = \"reference\"").unwrap();
        assert_eq!(cfg.model.hidden_dim, 768);
        assert_eq!(cfg.model.audio_xattn_layers, 8);
    }

    #[test]
    fn bad_sections_and_values_are_config_errors() {
        assert!(parse("nonsense = 1").is_err());
        assert!(parse("preset = \"galactic\"").is_err());
        assert!(parse("[model]\nepochs = 0").is_err());
        assert!(parse("[synth]\nsemantic_fraction = 2.0").is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&ModelConfig::desk());
        let b = config_hash(&ModelConfig::desk());
        assert_eq!(a, b);
        let c = config_hash(&ModelConfig::default());
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }
}

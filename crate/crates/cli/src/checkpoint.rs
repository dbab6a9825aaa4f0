//! Checkpoint directories: the clip-archive binary-array convention plus a
//! manifest recording kind, config, partition, and the array inventory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use cospeech_core::config::ModelConfig;
use cospeech_core::model::Stage2Model;
use cospeech_core::regions::RegionPartition;
use cospeech_core::rvq::CodecSet;

use crate::archive::{read_array, write_array, ArrayEntry};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: ModelConfig,
    pub partition: RegionPartition,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

pub const MANIFEST_FILE: &str = "checkpoint.json";

fn save_arrays(
    dir: &Path,
    kind: &str,
    config: &ModelConfig,
    partition: &RegionPartition,
    arrays: Vec<(String, Array2<f64>)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut inventory = BTreeMap::new();
    for (i, (name, arr)) in arrays.iter().enumerate() {
        let file = format!("arr_{i:05}.bin");
        write_array(
            &dir.join(&file),
            &[arr.nrows(), arr.ncols()],
            arr.as_slice().unwrap(),
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
        inventory.insert(
            name.clone(),
            ArrayEntry {
                file,
                shape: vec![arr.nrows(), arr.ncols()],
            },
        );
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config: config.clone(),
        partition: partition.clone(),
        arrays: inventory,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

fn load_arrays(dir: &Path, expect_kind: &str) -> Result<(CheckpointManifest, BTreeMap<String, Array2<f64>>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| CliError::Data(format!("checkpoint manifest: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?;
    if manifest.kind != expect_kind {
        return Err(CliError::Data(format!(
            "checkpoint kind {} where {expect_kind} expected",
            manifest.kind
        )));
    }
    let mut arrays = BTreeMap::new();
    for (name, entry) in &manifest.arrays {
        let arr = read_array(&dir.join(&entry.file)).map_err(|e| CliError::Data(e.to_string()))?;
        let arr2: Array2<f64> = arr
            .into_dimensionality()
            .map_err(|e| CliError::Data(format!("array {name}: {e}")))?;
        arrays.insert(name.clone(), arr2);
    }
    Ok((manifest, arrays))
}

pub fn save_codec(dir: &Path, config: &ModelConfig, set: &CodecSet) -> Result<()> {
    let partition = partition_of(set, config)?;
    save_arrays(dir, "codec", config, &partition, set.export())
}

fn partition_of(set: &CodecSet, config: &ModelConfig) -> Result<RegionPartition> {
    // The codec set does not carry the partition; reconstruct from joint
    // counts. Stage-1 training always runs on a default partition.
    let total: usize = set
        .codecs
        .values()
        .map(|c| c.cfg.joint_count)
        .sum::<usize>();
    // The face stub inflates the sum by one when the real face is empty.
    for j in [total, total.saturating_sub(1)] {
        if let Ok(p) = cospeech_core::default_region_partition(j) {
            let ok = cospeech_core::Region::ALL.iter().all(|&r| {
                let real = p.joints_of(r).len();
                set.codecs[&r].cfg.joint_count == real.max(1)
            });
            if ok {
                return Ok(p);
            }
        }
    }
    let _ = config;
    Err(CliError::Data(
        "cannot reconstruct a region partition from codec joint counts".into(),
    ))
}

pub fn load_codec(dir: &Path) -> Result<(ModelConfig, RegionPartition, CodecSet)> {
    let (manifest, arrays) = load_arrays(dir, "codec")?;
    let mut set = CodecSet::build(&manifest.config, &manifest.partition, 0);
    set.import(&arrays)?;
    set.freeze_all();
    Ok((manifest.config, manifest.partition, set))
}

pub fn save_model(dir: &Path, model: &Stage2Model) -> Result<()> {
    save_arrays(
        dir,
        "model",
        &model.cfg,
        &model.partition,
        model.export_arrays(),
    )
}

pub fn load_model(dir: &Path) -> Result<Stage2Model> {
    let (manifest, arrays) = load_arrays(dir, "model")?;
    let mut codec_set = CodecSet::build(&manifest.config, &manifest.partition, 0);
    codec_set.freeze_all();
    let mut model = Stage2Model::new(
        manifest.config.clone(),
        manifest.partition.clone(),
        &codec_set,
        0,
    )?;
    model.import_arrays(&arrays)?;
    Ok(model)
}

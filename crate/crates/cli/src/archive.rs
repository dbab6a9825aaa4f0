//! On-disk clip archive: a directory with a JSON manifest plus one binary
//! array file per tensor.
//!
//! Binary array layout (little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "DGAR"
//! 4       1           dtype code (0 = f32)
//! 5       1           ndim
//! 6       2           padding (zero)
//! 8       4 * ndim    dims (u32 each)
//! ...     4 * prod    row-major f32 payload
//! ```
//!
//! Reading is strict: magic, dtype, declared shape, and payload length must
//! all agree, and the manifest inventory must match the arrays on disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use cospeech_core::motion::WordSpan;
use cospeech_core::regions::RegionPartition;
use cospeech_core::{FeatureBundle, MotionSequence};

pub const MAGIC: &[u8; 4] = b"DGAR";
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("magic mismatch in {path}: expected DGAR")]
    MagicMismatch { path: String },
    #[error("unsupported dtype code {code} in {path}")]
    UnsupportedDtype { code: u8, path: String },
    #[error("shape/payload mismatch in {path}: header declares {declared} bytes, file holds {actual}")]
    PayloadMismatch {
        path: String,
        declared: usize,
        actual: usize,
    },
    #[error("manifest/array inconsistency: {0}")]
    ManifestMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write one array as a DGAR file. Values are stored as f32.
pub fn write_array(path: &Path, dims: &[usize], data: &[f64]) -> Result<(), ArchiveError> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    buf.push(dims.len() as u8);
    buf.extend_from_slice(&[0u8, 0u8]);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

/// Read a DGAR file into a dynamic-dimensional f64 array.
pub fn read_array(path: &Path) -> Result<ArrayD<f64>, ArchiveError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let display = path.display().to_string();
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(ArchiveError::MagicMismatch { path: display });
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F32 {
        return Err(ArchiveError::UnsupportedDtype {
            code: dtype,
            path: display,
        });
    }
    let ndim = bytes[5] as usize;
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(ArchiveError::PayloadMismatch {
            path: display,
            declared: header,
            actual: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let declared = header + 4 * count;
    if bytes.len() != declared {
        return Err(ArchiveError::PayloadMismatch {
            path: display,
            declared,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| ArchiveError::ManifestMismatch(e.to_string()))
}

/// Declared shape entry in the manifest inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipManifest {
    pub fps: f64,
    pub frames: usize,
    pub joints: usize,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub word_spans: Vec<WordSpan>,
    pub semantic_flags: Vec<u8>,
    pub partition: RegionPartition,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn put(
    dir: &Path,
    manifest: &mut ClipManifest,
    name: &str,
    dims: &[usize],
    data: &[f64],
) -> Result<(), ArchiveError> {
    let file = format!("{name}.bin");
    write_array(&dir.join(&file), dims, data)?;
    manifest.arrays.insert(
        name.to_string(),
        ArrayEntry {
            file,
            shape: dims.to_vec(),
        },
    );
    Ok(())
}

/// Write a clip (motion + features) as an archive directory.
pub fn write_archive(
    dir: &Path,
    seq: &MotionSequence,
    feat: &FeatureBundle,
) -> Result<(), ArchiveError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (l, j, _) = seq.frames.dim();
    let mut manifest = ClipManifest {
        fps: seq.fps,
        frames: l,
        joints: j,
        speaker_id: seq.speaker_id,
        emotion_id: seq.emotion_id,
        word_spans: seq.word_spans.clone(),
        semantic_flags: seq.semantic_flags.clone(),
        partition: seq.partition.clone(),
        arrays: BTreeMap::new(),
    };
    put(
        dir,
        &mut manifest,
        "frames",
        &[l, j, 6],
        seq.frames.as_slice().unwrap(),
    )?;
    put(
        dir,
        &mut manifest,
        "e_a",
        &[feat.e_a.nrows(), feat.e_a.ncols()],
        feat.e_a.as_slice().unwrap(),
    )?;
    put(
        dir,
        &mut manifest,
        "e_s",
        &[feat.e_s.nrows(), feat.e_s.ncols()],
        feat.e_s.as_slice().unwrap(),
    )?;
    put(
        dir,
        &mut manifest,
        "e_m",
        &[feat.e_m.len()],
        feat.e_m.as_slice().unwrap(),
    )?;
    put(
        dir,
        &mut manifest,
        "e_eps",
        &[feat.e_eps.len()],
        feat.e_eps.as_slice().unwrap(),
    )?;
    let (st, sj, _) = feat.seed_pose.dim();
    put(
        dir,
        &mut manifest,
        "seed_pose",
        &[st, sj, 6],
        feat.seed_pose.as_slice().unwrap(),
    )?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ArchiveError::ManifestParse(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(io_err(dir))?;
    Ok(())
}

/// Add one more array to an existing archive, updating the manifest.
pub fn append_array(
    dir: &Path,
    name: &str,
    dims: &[usize],
    data: &[f64],
) -> Result<(), ArchiveError> {
    let mut manifest = read_manifest(dir)?;
    put(dir, &mut manifest, name, dims, data)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ArchiveError::ManifestParse(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(io_err(dir))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest, ArchiveError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| ArchiveError::ManifestParse(e.to_string()))
}

fn named_array(
    dir: &Path,
    manifest: &ClipManifest,
    name: &str,
) -> Result<ArrayD<f64>, ArchiveError> {
    let entry = manifest
        .arrays
        .get(name)
        .ok_or_else(|| ArchiveError::ManifestMismatch(format!("array {name} not listed")))?;
    let arr = read_array(&dir.join(&entry.file))?;
    if arr.shape() != entry.shape.as_slice() {
        return Err(ArchiveError::ManifestMismatch(format!(
            "array {name}: manifest shape {:?} but file holds {:?}",
            entry.shape,
            arr.shape()
        )));
    }
    Ok(arr)
}

/// Read a clip archive back into memory. `write_archive ∘ read_archive` is
/// the identity on the stored f32 values.
pub fn read_archive(dir: &Path) -> Result<(MotionSequence, FeatureBundle), ArchiveError> {
    let manifest = read_manifest(dir)?;
    let frames = named_array(dir, &manifest, "frames")?;
    let e_a = named_array(dir, &manifest, "e_a")?;
    let e_s = named_array(dir, &manifest, "e_s")?;
    let e_m = named_array(dir, &manifest, "e_m")?;
    let e_eps = named_array(dir, &manifest, "e_eps")?;
    let seed_pose = named_array(dir, &manifest, "seed_pose")?;
    if frames.shape() != [manifest.frames, manifest.joints, 6] {
        return Err(ArchiveError::ManifestMismatch(format!(
            "frames shape {:?} does not match manifest ({}, {}, 6)",
            frames.shape(),
            manifest.frames,
            manifest.joints
        )));
    }
    if manifest.semantic_flags.len() != manifest.frames {
        return Err(ArchiveError::ManifestMismatch(
            "semantic_flags length differs from frame count".into(),
        ));
    }
    let to3 = |a: ArrayD<f64>| -> Array3<f64> { a.into_dimensionality().unwrap() };
    let to2 = |a: ArrayD<f64>| -> Array2<f64> { a.into_dimensionality().unwrap() };
    let to1 = |a: ArrayD<f64>| -> Array1<f64> { a.into_dimensionality().unwrap() };
    let seq = MotionSequence {
        frames: to3(frames),
        fps: manifest.fps,
        partition: manifest.partition.clone(),
        semantic_flags: manifest.semantic_flags.clone(),
        speaker_id: manifest.speaker_id,
        emotion_id: manifest.emotion_id,
        word_spans: manifest.word_spans.clone(),
    };
    let feat = FeatureBundle {
        e_a: to2(e_a),
        e_s: to2(e_s),
        e_m: to1(e_m),
        e_eps: to1(e_eps),
        speaker_id: manifest.speaker_id,
        seed_pose: to3(seed_pose),
    };
    Ok((seq, feat))
}

/// Dataset directory: `clip_0000/`, `clip_0001/`, ... Returns sorted paths.
pub fn list_clips(dir: &Path) -> Result<Vec<std::path::PathBuf>, ArchiveError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("clip_"))
                .unwrap_or(false)
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:04}")
}

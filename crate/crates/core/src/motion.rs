//! Motion sequences in 6-value rotation representation, with validation.

use ndarray::{Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::regions::RegionPartition;

/// A word span: `[start_frame, end_frame)` labelled with a vocabulary id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub word_id: usize,
}

/// Per-frame joint rotations (rot6d) plus annotations.
///
/// `frames` is (L, J, 6); the 6 values are the first two columns of a
/// rotation matrix. Orthonormality is required of dataset ground truth
/// (within 1e-3) but not of generated output.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Array3<f64>,
    pub fps: f64,
    pub partition: RegionPartition,
    pub semantic_flags: Vec<u8>,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub word_spans: Vec<WordSpan>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint_count(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Angular-speed scalar per frame for one joint: Euclidean distance
    /// between consecutive rot6d vectors times fps. Frame 0 repeats frame 1.
    pub fn joint_speed(&self, joint: usize) -> Vec<f64> {
        let l = self.len();
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

/// A single invariant violation; data, not an exception.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub detail: String,
}

impl Violation {
    fn new(field: &str, detail: String) -> Self {
        Violation {
            field: field.to_string(),
            detail,
        }
    }
}

fn rot6d_column_norms(v: ArrayView1<f64>) -> (f64, f64) {
    let a = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let b = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5]).sqrt();
    (a, b)
}

/// Check all [`MotionSequence`] invariants. Empty result means valid.
///
/// `require_orthonormal` enables the ground-truth-only check that each
/// rot6d 6-vector's two column vectors are unit length within 1e-3.
pub fn validate_sequence(seq: &MotionSequence, require_orthonormal: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    let l = seq.len();
    let j = seq.joint_count();

    // Region partition must exactly cover the joint set.
    if seq.partition.joint_count != j {
        out.push(Violation::new(
            "regions",
            format!(
                "partition joint count {} != sequence joint count {j}",
                seq.partition.joint_count
            ),
        ));
    }
    let mut seen = vec![Vec::new(); j];
    for (region, joints) in &seq.partition.joints {
        for &jt in joints {
            if jt >= j {
                out.push(Violation::new(
                    "regions",
                    format!("joint {jt} out of range in region {}", region.name()),
                ));
            } else {
                seen[jt].push(*region);
            }
        }
    }
    for (jt, regions) in seen.iter().enumerate() {
        if regions.len() > 1 {
            out.push(Violation::new(
                "regions",
                format!("region overlap: joint {jt}"),
            ));
        } else if regions.is_empty() {
            out.push(Violation::new(
                "regions",
                format!("uncovered joint: joint {jt}"),
            ));
        }
    }

    if seq.semantic_flags.len() != l {
        out.push(Violation::new(
            "semantic_flags",
            format!("length {} != frame count {l}", seq.semantic_flags.len()),
        ));
    }
    for (t, &f) in seq.semantic_flags.iter().enumerate() {
        if f > 1 {
            out.push(Violation::new(
                "semantic_flags",
                format!("flag {f} at frame {t} outside {{0,1}}"),
            ));
        }
    }

    // Word spans: in range, non-overlapping.
    let mut spans = seq.word_spans.clone();
    spans.sort_by_key(|s| s.start);
    for s in &spans {
        if s.start >= s.end || s.end > l {
            out.push(Violation::new(
                "word_spans",
                format!("span [{}, {}) outside [0, {l})", s.start, s.end),
            ));
        }
    }
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            out.push(Violation::new(
                "word_spans",
                format!(
                    "overlap between spans [{}, {}) and [{}, {})",
                    w[0].start, w[0].end, w[1].start, w[1].end
                ),
            ));
        }
    }

    for t in 0..l {
        for jt in 0..j {
            let v = seq.frames.slice(ndarray::s![t, jt, ..]);
            if v.iter().any(|x| !x.is_finite()) {
                out.push(Violation::new(
                    "frames",
                    format!("non-finite rot6d at frame {t}, joint {jt}"),
                ));
                continue;
            }
            if require_orthonormal {
                let (a, b) = rot6d_column_norms(v);
                if (a - 1.0).abs() > 1e-3 || (b - 1.0).abs() > 1e-3 {
                    out.push(Violation::new(
                        "frames",
                        format!("rot6d columns not unit length at frame {t}, joint {jt}"),
                    ));
                }
            }
        }
    }

    out
}

//! Per-clip conditioning features and the provider interface.

use ndarray::{Array1, Array2, Array3};

use crate::error::{CoreError, Result};
use crate::motion::MotionSequence;

/// Conditioning features for one clip.
///
/// `e_a` is (L, D_a) frame-level audio features; `e_s` is (L, D_s) word
/// embeddings, zero on frames not covered by a word span; `e_m` / `e_eps`
/// are utterance-level motion-style and emotion embeddings (D_e each);
/// `seed_pose` is the first 4 ground-truth frames (4, J, 6).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub e_a: Array2<f64>,
    pub e_s: Array2<f64>,
    pub e_m: Array1<f64>,
    pub e_eps: Array1<f64>,
    pub speaker_id: usize,
    pub seed_pose: Array3<f64>,
}

impl FeatureBundle {
    pub fn check_finite(&self) -> Result<()> {
        if self.e_a.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("e_a"));
        }
        if self.e_s.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("e_s"));
        }
        if self.e_m.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("e_m"));
        }
        if self.e_eps.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("e_eps"));
        }
        if self.seed_pose.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("seed_pose"));
        }
        Ok(())
    }
}

/// Source of conditioning features for a motion sequence. The synthetic
/// generator is the default implementation; adapters for real pretrained
/// encoders plug in here but are not part of this crate.
pub trait FeatureProvider {
    fn provide(&self, seq: &MotionSequence) -> Result<FeatureBundle>;
}

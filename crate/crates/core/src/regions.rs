//! Body-region partition of the joint set.
//!
//! Generation runs per region: hands, upper body, lower body, face. The
//! partition must be an exact cover of `0..J`. Two layouts are built in:
//! the 55-joint SMPL-X convention and the 12-joint desk layout used by the
//! synthetic dataset; other joint counts get a proportional split.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    Hand,
    Upper,
    Lower,
    Face,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Hand, Region::Upper, Region::Lower, Region::Face];

    /// Regions that carry body (non-face) motion.
    pub const BODY: [Region; 3] = [Region::Hand, Region::Upper, Region::Lower];

    pub fn name(self) -> &'static str {
        match self {
            Region::Hand => "hand",
            Region::Upper => "upper",
            Region::Lower => "lower",
            Region::Face => "face",
        }
    }
}

/// Exact cover of joints by region, plus the analysis channel conventions
/// (arm chain, shoulder, forearm) that depend on the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub joint_count: usize,
    pub joints: BTreeMap<Region, Vec<usize>>,
    /// Shoulders, elbows, wrists plus the spine chain; the joints the
    /// inertial prior and the arm-swing analysis operate on.
    pub arm_chain: Vec<usize>,
    /// Representative shoulder joint for spectral statistics.
    pub shoulder: usize,
    /// Representative forearm joint for phase-locking statistics.
    pub forearm: usize,
}

impl RegionPartition {
    pub fn joints_of(&self, r: Region) -> &[usize] {
        self.joints.get(&r).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// True when the partition is an exact cover of `0..joint_count`.
    pub fn is_exact_cover(&self) -> bool {
        let mut seen = vec![0usize; self.joint_count];
        for joints in self.joints.values() {
            for &j in joints {
                if j >= self.joint_count {
                    return false;
                }
                seen[j] += 1;
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Deterministic region partition for a given joint count.
///
/// - `J = 55`: SMPL-X convention. Hands are the 30 finger joints (25..=54),
///   upper is the spine/neck/head/collar/shoulder/elbow/wrist chain, lower is
///   pelvis/legs/feet, face is jaw and eyes (22..=24).
/// - `J = 12`: desk layout. lower = {0,1}, upper = {2..=7}
///   (2,3 spine; 4,5 shoulders; 6,7 elbows), hands = {8..=11}, face empty.
/// - other `J >= 12`: proportional split in the fixed order
///   lower, upper, hands, face with ratios 2:6:4:rest of the desk layout.
pub fn default_region_partition(joint_count: usize) -> Result<RegionPartition> {
    if joint_count < 12 {
        return Err(CoreError::JointCountTooSmall(joint_count));
    }
    let mut joints = BTreeMap::new();
    let (arm_chain, shoulder, forearm);
    match joint_count {
        55 => {
            joints.insert(Region::Hand, (25..=54).collect());
            joints.insert(
                Region::Upper,
                vec![3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21],
            );
            joints.insert(Region::Lower, vec![0, 1, 2, 4, 5, 7, 8, 10, 11]);
            joints.insert(Region::Face, vec![22, 23, 24]);
            // SMPL-X 16..=21 are shoulders/elbows/wrists; 3,6,9 the spine.
            arm_chain = vec![3, 6, 9, 16, 17, 18, 19, 20, 21];
            shoulder = 16;
            forearm = 18;
        }
        12 => {
            joints.insert(Region::Lower, vec![0, 1]);
            joints.insert(Region::Upper, (2..=7).collect());
            joints.insert(Region::Hand, (8..=11).collect());
            joints.insert(Region::Face, vec![]);
            arm_chain = (2..=7).collect();
            shoulder = 4;
            forearm = 6;
        }
        j => {
            let lower_n = (j * 2 + 6) / 12;
            let upper_n = (j * 6) / 12;
            let hand_n = (j * 4) / 12;
            let lower_end = lower_n;
            let upper_end = lower_end + upper_n.max(4);
            let hand_end = (upper_end + hand_n).min(j);
            joints.insert(Region::Lower, (0..lower_end).collect());
            joints.insert(Region::Upper, (lower_end..upper_end).collect());
            joints.insert(Region::Hand, (upper_end..hand_end).collect());
            joints.insert(Region::Face, (hand_end..j).collect());
            let upper: Vec<usize> = (lower_end..upper_end).collect();
            shoulder = upper[upper.len() / 3];
            forearm = upper[2 * upper.len() / 3];
            arm_chain = upper;
        }
    }
    Ok(RegionPartition {
        joint_count,
        joints,
        arm_chain,
        shoulder,
        forearm,
    })
}

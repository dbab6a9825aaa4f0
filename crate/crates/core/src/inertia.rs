//! Inertial beat prior: anthropometry-weighted constant-velocity
//! regularization of decoded beat poses.
//!
//! Each arm-chain joint gets a smoothing coefficient
//! `τ = τ_base · sqrt(m_j / m_max) · (1 − Ψ_t) · (1 + α σ²_t)`
//! built from body-segment mass fractions. The loss penalizes deviation
//! from the constant-velocity prediction `x̂_t = 2 x_{t−1} − x_{t−2}` on
//! masked joints only, so semantic frames (Ψ → 1) and light segments are
//! left unconstrained. Training-time only; inference carries no cost.

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::regions::RegionPartition;

/// Heaviest segment fraction (abdomen / mid trunk).
pub const M_MAX: f64 = 0.163;

// Body-segment mass fractions (fraction of total body mass), from standard
// anthropometric segment tables: mid trunk 0.163, upper trunk 0.160,
// lower trunk 0.112, upper arm 0.0271, forearm 0.0162, hand 0.0061.
const TRUNK_FRACTIONS: [f64; 3] = [0.163, 0.160, 0.112];
const ARM_FRACTIONS: [f64; 3] = [0.0271, 0.0162, 0.0061];

/// Per-joint inertial weights and the arm-chain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InertiaTable {
    pub mass_fraction: Vec<f64>,
    pub m_max: f64,
    pub arm_chain_mask: Vec<bool>,
}

impl InertiaTable {
    /// Build the table for a partition. Masked joints are the partition's
    /// arm chain (spine + shoulders/elbows/wrists); everything else,
    /// including all face joints, gets weight zero.
    pub fn for_partition(partition: &RegionPartition) -> Self {
        let j = partition.joint_count;
        let mut mass = vec![0.0; j];
        let mut mask = vec![false; j];
        let chain = &partition.arm_chain;
        let n_spine = (chain.len() / 3).max(1);
        for (i, &joint) in chain.iter().enumerate() {
            mask[joint] = true;
            mass[joint] = if i < n_spine {
                TRUNK_FRACTIONS[i % TRUNK_FRACTIONS.len()]
            } else {
                ARM_FRACTIONS[(i - n_spine) / 2 % ARM_FRACTIONS.len()]
            };
        }
        InertiaTable {
            mass_fraction: mass,
            m_max: M_MAX,
            arm_chain_mask: mask,
        }
    }

    pub fn masked_joints(&self) -> Vec<usize> {
        self.arm_chain_mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| if m { Some(j) } else { None })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (j, (&m, &masked)) in self
            .mass_fraction
            .iter()
            .zip(self.arm_chain_mask.iter())
            .enumerate()
        {
            if masked && !(m > 0.0 && m <= self.m_max) {
                return Err(CoreError::InvalidConfig(format!(
                    "mass fraction {m} for masked joint {j} outside (0, m_max]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame, per-joint smoothing coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct IbpWeights {
    /// (L, J), zero on unmasked joints and on fully semantic frames.
    pub tau: Array2<f64>,
}

/// Evaluate the τ formula. `psi` is the per-frame gate, `sigma2` the
/// per-frame posterior variance (mean of `exp(logvar)` over the bottleneck
/// dimensions).
pub fn tau_weights(
    table: &InertiaTable,
    psi: &[f64],
    sigma2: &[f64],
    tau_base: f64,
    alpha: f64,
) -> Result<IbpWeights> {
    if psi.len() != sigma2.len() {
        return Err(CoreError::LengthMismatch {
            a: psi.len(),
            b: sigma2.len(),
        });
    }
    if let Some(s) = sigma2.iter().find(|&&s| s < 0.0) {
        let _ = s;
        return Err(CoreError::NegativeVariance("tau_weights"));
    }
    let l = psi.len();
    let j = table.mass_fraction.len();
    let mut tau = Array2::zeros((l, j));
    for t in 0..l {
        let frame_term = (1.0 - psi[t]) * (1.0 + alpha * sigma2[t]);
        for joint in 0..j {
            if table.arm_chain_mask[joint] {
                tau[[t, joint]] = tau_base
                    * (table.mass_fraction[joint] / table.m_max).sqrt()
                    * frame_term;
            }
        }
    }
    Ok(IbpWeights { tau })
}

/// Constant-velocity prediction `x̂_t = 2 x_{t−1} − x_{t−2}` for `t ≥ 2`.
/// Returns (L−2, J, 6): row `i` predicts frame `i + 2`.
pub fn const_velocity_pred(x: &Array3<f64>) -> Result<Array3<f64>> {
    let (l, j, c) = x.dim();
    if l < 3 {
        return Err(CoreError::TooShort {
            context: "const_velocity_pred",
            need: 3,
            got: l,
        });
    }
    let mut pred = Array3::zeros((l - 2, j, c));
    for t in 2..l {
        for jj in 0..j {
            for cc in 0..c {
                pred[[t - 2, jj, cc]] = 2.0 * x[[t - 1, jj, cc]] - x[[t - 2, jj, cc]];
            }
        }
    }
    Ok(pred)
}

/// τ-weighted mean squared deviation from constant velocity: mean over
/// masked joints and frames `t ≥ 2` of `τ_{j,t} ‖x_{j,t} − x̂_{j,t}‖²`.
pub fn acc_loss(x: &Array3<f64>, pred: &Array3<f64>, weights: &IbpWeights) -> Result<f64> {
    let (l, j, c) = x.dim();
    if pred.dim() != (l - 2, j, c) || weights.tau.dim() != (l, j) {
        return Err(CoreError::ShapeMismatch {
            context: "acc_loss",
            expected: format!("pred ({}, {j}, {c}), tau ({l}, {j})", l - 2),
            got: format!("pred {:?}, tau {:?}", pred.dim(), weights.tau.dim()),
        });
    }
    // Masked joints are the columns with any nonzero tau. A fully semantic
    // clip (tau identically zero) has zero loss, so the fallback denominator
    // never changes the result.
    let masked: Vec<usize> = (0..j)
        .filter(|&jj| weights.tau.column(jj).iter().any(|&v| v != 0.0))
        .collect();
    let n_joints = if masked.is_empty() { j } else { masked.len() };
    let denom = ((l - 2) * n_joints) as f64;
    let mut total = 0.0;
    for t in 2..l {
        for &jj in &masked {
            let mut err2 = 0.0;
            for cc in 0..c {
                let d = x[[t, jj, cc]] - pred[[t - 2, jj, cc]];
                err2 += d * d;
            }
            total += weights.tau[[t, jj]] * err2;
        }
    }
    Ok(total / denom)
}

/// Unnormalized τ-weighted constant-velocity penalty over one region's
/// decoded motion (L, J_r·6) on the graph.
///
/// `tau_cols` must be (L−2, J_r·6): each joint's τ value repeated across its
/// six rot6d columns for frames 2..L, zeros for unmasked joints. τ is a
/// constant (no gradient flows into the gate through it).
pub fn acc_loss_region_sum_graph(g: &mut Graph, x: NodeId, tau_cols: &Array2<f64>) -> NodeId {
    let (l, _) = g.shape(x);
    let x2 = g.slice_rows(x, 2, l);
    let x1 = g.slice_rows(x, 1, l - 1);
    let x0 = g.slice_rows(x, 0, l - 2);
    let x1x2 = g.scale(x1, 2.0);
    let pred = g.sub(x1x2, x0);
    let err = g.sub(x2, pred);
    let err2 = g.square(err);
    let tau = g.input(tau_cols.clone());
    let weighted = g.mul(err2, tau);
    g.sum_all(weighted)
}

/// Normalized single-region graph loss: mean over masked joints and frames
/// `t ≥ 2` of the τ-weighted squared deviation.
pub fn acc_loss_graph(
    g: &mut Graph,
    x: NodeId,
    tau_cols: &Array2<f64>,
    n_masked: usize,
) -> NodeId {
    let (l, _) = g.shape(x);
    let total = acc_loss_region_sum_graph(g, x, tau_cols);
    g.scale(total, 1.0 / ((l - 2) * n_masked.max(1)) as f64)
}

/// Expand per-(frame, joint) τ into per-(frame, column) weights for a region
/// slice, restricted to frames 2..L.
pub fn tau_region_columns(
    weights: &IbpWeights,
    region_joints: &[usize],
) -> (Array2<f64>, usize) {
    let l = weights.tau.nrows();
    let mut cols = Array2::zeros((l - 2, region_joints.len() * 6));
    let mut n_masked = 0;
    for (ji, &j) in region_joints.iter().enumerate() {
        let masked = weights.tau.column(j).iter().any(|&v| v != 0.0);
        if masked {
            n_masked += 1;
        }
        for t in 2..l {
            for c in 0..6 {
                cols[[t - 2, ji * 6 + c]] = weights.tau[[t, j]];
            }
        }
    }
    (cols, n_masked)
}

//! Reference evaluators for the camera supervision objectives.

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::posegraph::{FrameId, PoseEdge};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResidual {
    pub rot_residual: f64,
    pub trans_residual: f64,
}

/// Rotation metric used by [`pair_residual_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMetric {
    /// L1 distance between quaternion components after sign alignment.
    #[default]
    QuaternionL1,
    /// Geodesic angle in radians.
    Geodesic,
}

pub fn pair_residual(edge: &PoseEdge, gt_relative: &Pose) -> PairResidual {
    pair_residual_with(edge, gt_relative, RotationMetric::QuaternionL1)
}

pub fn pair_residual_with(edge: &PoseEdge, gt_relative: &Pose, metric: RotationMetric) -> PairResidual {
    let rot_residual = match metric {
        RotationMetric::QuaternionL1 => {
            let q = edge.rel_rotation.aligned_to(&gt_relative.rotation).coords();
            q.iter()
                .zip(gt_relative.rotation.coords())
                .map(|(a, b)| (a - b).abs())
                .sum()
        }
        RotationMetric::Geodesic => edge.rel_rotation.geodesic_rad(&gt_relative.rotation),
    };
    PairResidual {
        rot_residual,
        trans_residual: (edge.rel_translation - gt_relative.translation).lp_norm(1),
    }
}

/// `c * residual - alpha * ln(c)`; minimized at `c = alpha / residual`.
pub fn conf_loss(residual: f64, c: f64, alpha: f64) -> f64 {
    c * residual - alpha * c.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSet {
    /// Pairs `i -> j` with `i < j`.
    Causal,
    /// Every ordered pair `i != j`.
    AllOrdered,
}

impl PairSet {
    pub fn contains(&self, src: FrameId, dst: FrameId) -> bool {
        match self {
            PairSet::Causal => src < dst,
            PairSet::AllOrdered => src != dst,
        }
    }
}

/// Mean over the selected pairs of the rotation plus translation
/// confidence losses.
pub fn batch_camera_loss(
    edges: &[(PoseEdge, Pose)],
    pair_set: PairSet,
    alpha: f64,
) -> Result<f64> {
    let terms: Vec<f64> = edges
        .iter()
        .filter(|(e, _)| pair_set.contains(e.src, e.dst))
        .map(|(e, gt)| {
            let r = pair_residual(e, gt);
            conf_loss(r.rot_residual, e.conf_rot, alpha)
                + conf_loss(r.trans_residual, e.conf_trans, alpha)
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Geodesic rotation angle plus translation L2 distance.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    a.rotation.geodesic_rad(&b.rotation) + (a.translation - b.translation).norm()
}

fn check_ids(pred: &BTreeMap<FrameId, Pose>, gt: &BTreeMap<FrameId, Pose>) -> Result<()> {
    if pred.len() != gt.len() || pred.keys().zip(gt.keys()).any(|(a, b)| a != b) {
        return Err(Error::MismatchedIds);
    }
    Ok(())
}

/// Sum of absolute pose distances.
pub fn reference_abs_loss(
    pred: &BTreeMap<FrameId, Pose>,
    gt: &BTreeMap<FrameId, Pose>,
    d_pose: impl Fn(&Pose, &Pose) -> f64,
) -> Result<f64> {
    check_ids(pred, gt)?;
    Ok(pred.values().zip(gt.values()).map(|(p, g)| d_pose(p, g)).sum())
}

/// Sum over ordered pairs `i != j` of the relative pose distance.
pub fn reference_pi3_loss(
    pred: &BTreeMap<FrameId, Pose>,
    gt: &BTreeMap<FrameId, Pose>,
    d_pose: impl Fn(&Pose, &Pose) -> f64,
) -> Result<f64> {
    check_ids(pred, gt)?;
    let p: Vec<&Pose> = pred.values().collect();
    let g: Vec<&Pose> = gt.values().collect();
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if i != j {
                total += d_pose(&p[i].relative(p[j]), &g[i].relative(g[j]));
            }
        }
    }
    Ok(total)
}

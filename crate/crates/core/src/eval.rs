//! Trajectory accuracy, confidence diagnostics and robustness metrics.

use crate::error::{Error, Result};
use crate::geom::{umeyama_se3, umeyama_sim3, Pose, Sim3Alignment, Vec3};
use crate::oracle::FramePlan;
use crate::posegraph::FrameId;
use crate::stream::{EventKind, StreamEvent};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type Trajectory = BTreeMap<FrameId, Pose>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    #[default]
    Sim3,
    Se3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub ate_rmse: f64,
    /// Percent of the reference path length.
    pub ate_norm: f64,
    pub rpe_t: f64,
    /// Degrees.
    pub rpe_r: f64,
    /// Degrees, after alignment.
    pub rot_rmse: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub ate_rmse: f64,
    pub ate_norm: f64,
    pub rot_rmse: f64,
    pub alignment: Sim3Alignment,
}

/// The reference restricted to the frames present in `estimated`, so frames
/// the estimator rejected are left out of both.
pub fn restrict_to(reference: &Trajectory, estimated: &Trajectory) -> Result<Trajectory> {
    estimated
        .keys()
        .map(|id| {
            reference
                .get(id)
                .map(|p| (*id, *p))
                .ok_or(Error::MismatchedIds)
        })
        .collect()
}

fn check_ids(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::MismatchedIds);
    }
    Ok(())
}

/// Sum of consecutive translation distances.
pub fn path_length(t: &Trajectory) -> f64 {
    let p: Vec<Vec3> = t.values().map(|p| p.translation).collect();
    p.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

pub fn ate(estimated: &Trajectory, reference: &Trajectory, alignment: Alignment) -> Result<AteResult> {
    check_ids(estimated, reference)?;
    if estimated.len() < 3 {
        return Err(Error::TooFewPoses {
            need: 3,
            got: estimated.len(),
        });
    }
    let src: Vec<Vec3> = estimated.values().map(|p| p.translation).collect();
    let dst: Vec<Vec3> = reference.values().map(|p| p.translation).collect();
    let a = match alignment {
        Alignment::Sim3 => umeyama_sim3(&src, &dst)?,
        Alignment::Se3 => umeyama_se3(&src, &dst)?,
    };
    let n = src.len() as f64;
    let ate_rmse = (a.sq_error(&src, &dst) / n).sqrt();
    let rot_rmse = (estimated
        .values()
        .zip(reference.values())
        .map(|(e, r)| a.rotation.multiply(&e.rotation).geodesic_deg(&r.rotation).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let len = path_length(reference);
    Ok(AteResult {
        ate_rmse,
        ate_norm: if len > 0.0 { 100.0 * ate_rmse / len } else { 0.0 },
        rot_rmse,
        alignment: a,
    })
}

/// Relative pose error over index pairs `(k, k + delta)` of the shared,
/// id-sorted frames: RMSE of translation norm and of rotation angle in
/// degrees.
pub fn rpe(estimated: &Trajectory, reference: &Trajectory, delta: usize) -> Result<(f64, f64)> {
    check_ids(estimated, reference)?;
    let delta = delta.max(1);
    if estimated.len() <= delta {
        return Err(Error::TooFewPoses {
            need: delta + 1,
            got: estimated.len(),
        });
    }
    let e: Vec<&Pose> = estimated.values().collect();
    let r: Vec<&Pose> = reference.values().collect();
    let (mut st, mut sr) = (0.0, 0.0);
    let pairs = e.len() - delta;
    for k in 0..pairs {
        let de = e[k].relative(e[k + delta]);
        let dr = r[k].relative(r[k + delta]);
        let err = dr.relative(&de);
        st += err.translation.norm_squared();
        sr += err.rotation.geodesic_deg(&crate::geom::UnitQuaternion::identity()).powi(2);
    }
    Ok(((st / pairs as f64).sqrt(), (sr / pairs as f64).sqrt()))
}

pub fn evaluate(
    estimated: &Trajectory,
    reference: &Trajectory,
    alignment: Alignment,
    rpe_delta: usize,
) -> Result<TrajectoryReport> {
    let a = ate(estimated, reference, alignment)?;
    let (rpe_t, rpe_r) = rpe(estimated, reference, rpe_delta)?;
    Ok(TrajectoryReport {
        ate_rmse: a.ate_rmse,
        ate_norm: a.ate_norm,
        rpe_t,
        rpe_r,
        rot_rmse: a.rot_rmse,
        frames: estimated.len(),
    })
}

/// Fraction of scenes on which each method attains the minimum; methods tied
/// for the minimum share the scene equally.
pub fn win_rate(
    per_scene: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<BTreeMap<String, f64>> {
    let scenes: std::collections::BTreeSet<&String> =
        per_scene.values().flat_map(|m| m.keys()).collect();
    let mut credit: BTreeMap<String, f64> = per_scene.keys().map(|m| (m.clone(), 0.0)).collect();
    for scene in &scenes {
        let mut values = Vec::with_capacity(per_scene.len());
        for (method, by_scene) in per_scene {
            let v = by_scene.get(*scene).ok_or_else(|| Error::MissingScene {
                method: method.clone(),
                scene: (*scene).clone(),
            })?;
            values.push((method, *v));
        }
        let best = values.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        let winners: Vec<_> = values.iter().filter(|(_, v)| *v == best).collect();
        let share = 1.0 / winners.len() as f64;
        for (m, _) in winners {
            *credit.get_mut(*m).expect("seeded above") += share;
        }
    }
    let n = scenes.len().max(1) as f64;
    Ok(credit.into_iter().map(|(m, c)| (m, c / n)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Rotation,
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub count: usize,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBinSummary {
    pub component: Component,
    pub bins: Vec<ConfidenceBin>,
}

impl ConfidenceBinSummary {
    /// Mean error strictly decreases from the lowest to the highest
    /// confidence bin.
    pub fn strictly_decreasing(&self) -> bool {
        self.bins.windows(2).all(|w| w[1].mean_error < w[0].mean_error)
    }
}

/// Groups `(confidence, error)` samples into `n_bins` equal-mass bins by
/// confidence and summarizes the error of each.
pub fn confidence_bins(
    samples: &[(f64, f64)],
    n_bins: usize,
    component: Component,
) -> Result<ConfidenceBinSummary> {
    let n_bins = n_bins.max(1);
    if samples.len() < n_bins {
        return Err(Error::TooFewSamples {
            need: n_bins,
            got: samples.len(),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = sorted.len();
    let bins = (0..n_bins)
        .map(|k| {
            let chunk = &sorted[k * n / n_bins..(k + 1) * n / n_bins];
            let m = chunk.len() as f64;
            let mean = chunk.iter().map(|s| s.1).sum::<f64>() / m;
            let var = chunk.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / m;
            let (lo, hi) = (chunk[0].0, chunk[chunk.len() - 1].0);
            ConfidenceBin {
                lo,
                hi,
                center: 0.5 * (lo + hi),
                count: chunk.len(),
                mean_error: mean,
                std_error: var.sqrt(),
            }
        })
        .collect();
    Ok(ConfidenceBinSummary { component, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Fraction of distractor frames rejected; 1 when there are none.
    pub sr: f64,
    pub clean_accept: f64,
    pub bfs: f64,
    pub distractors: usize,
    pub clean: usize,
}

impl RobustnessReport {
    pub fn from_counts(
        rejected_distractors: usize,
        distractors: usize,
        accepted_clean: usize,
        clean: usize,
    ) -> Self {
        let rate = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let sr = rate(rejected_distractors, distractors);
        let clean_accept = rate(accepted_clean, clean);
        Self {
            sr,
            clean_accept,
            bfs: 0.5 * sr + 0.5 * clean_accept,
            distractors,
            clean,
        }
    }
}

/// Scores the accept/reject decisions of an event log against the plan's
/// clean/distractor labels. Every planned frame needs exactly one decision.
pub fn robustness_score(events: &[StreamEvent], plan: &FramePlan) -> Result<RobustnessReport> {
    let mut decided: BTreeMap<FrameId, bool> = BTreeMap::new();
    for e in events {
        let accepted = match e.kind {
            EventKind::Accepted { .. } => true,
            EventKind::Rejected { .. } => false,
            _ => continue,
        };
        if plan.get(e.frame).is_none() {
            return Err(Error::PlanMismatch(format!("frame {} is not in the plan", e.frame)));
        }
        if decided.insert(e.frame, accepted).is_some() {
            return Err(Error::PlanMismatch(format!("frame {} decided twice", e.frame)));
        }
    }
    let (mut rej_d, mut n_d, mut acc_c, mut n_c) = (0, 0, 0, 0);
    for entry in &plan.entries {
        let accepted = *decided
            .get(&entry.id)
            .ok_or_else(|| Error::PlanMismatch(format!("frame {} has no decision", entry.id)))?;
        if entry.is_distractor() {
            n_d += 1;
            rej_d += usize::from(!accepted);
        } else {
            n_c += 1;
            acc_c += usize::from(accepted);
        }
    }
    Ok(RobustnessReport::from_counts(rej_d, n_d, acc_c, n_c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::UnitQuaternion;
    use crate::oracle::{FrameSource, PlanEntry};

    fn traj(points: &[[f64; 3]]) -> Trajectory {
        points
            .iter()
            .enumerate()
            .map(|(k, p)| (FrameId(k as u64 + 1), Pose::from_translation(Vec3::from(*p))))
            .collect()
    }

    #[test]
    fn ate_trivial_cases() {
        let r = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.5]]);
        let a = ate(&r, &r, Alignment::Sim3).unwrap();
        assert!(a.ate_rmse < 1e-12 && a.ate_norm < 1e-10);
        let scaled: Trajectory = r
            .iter()
            .map(|(k, p)| (*k, Pose::from_translation(p.translation * 3.0)))
            .collect();
        assert!(ate(&scaled, &r, Alignment::Sim3).unwrap().ate_rmse < 1e-9);
        assert!(ate(&scaled, &r, Alignment::Se3).unwrap().ate_rmse > 0.1);
        assert!(matches!(
            ate(&traj(&[[0.0; 3], [1.0, 0.0, 0.0]]), &traj(&[[0.0; 3], [1.0, 0.0, 0.0]]), Alignment::Sim3),
            Err(Error::TooFewPoses { .. })
        ));
        assert!(matches!(
            ate(&r, &traj(&[[0.0; 3]; 5]), Alignment::Sim3),
            Err(Error::MismatchedIds)
        ));
    }

    #[test]
    fn ate_norm_uses_path_length() {
        let r = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(path_length(&r), 3.0);
        let mut e = r.clone();
        e.insert(FrameId(3), Pose::from_translation(Vec3::new(1.4, 1.0, 0.0)));
        let a = ate(&e, &r, Alignment::Se3).unwrap();
        assert!((a.ate_norm - 100.0 * a.ate_rmse / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rpe_constant_drift() {
        let r = traj(&(0..10).map(|k| [k as f64, 0.0, 0.0]).collect::<Vec<_>>());
        let e = traj(&(0..10).map(|k| [1.1 * k as f64, 0.0, 0.0]).collect::<Vec<_>>());
        let (t, rot) = rpe(&e, &r, 1).unwrap();
        assert!((t - 0.1).abs() < 1e-12);
        assert_eq!(rot, 0.0);
        assert_eq!(rpe(&r, &r, 1).unwrap(), (0.0, 0.0));
        assert!(rpe(&r, &r, 10).is_err());
    }

    #[test]
    fn rpe_ignores_global_rigid_motion() {
        let r: Trajectory = (1..=8)
            .map(|k| {
                let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.2, 1.0, 0.1), 0.3 * k as f64);
                (FrameId(k), Pose::new(q, Vec3::new(k as f64, (k * k) as f64 * 0.1, 0.0)))
            })
            .collect();
        let mut e = r.clone();
        e.insert(FrameId(4), Pose::from_translation(Vec3::new(0.0, 3.0, 1.0)));
        let g = Pose::new(
            UnitQuaternion::from_axis_angle(&Vec3::x(), 1.2),
            Vec3::new(5.0, -1.0, 2.0),
        );
        let moved: Trajectory = e.iter().map(|(k, p)| (*k, g.compose(p))).collect();
        let (a, b) = (rpe(&e, &r, 2).unwrap(), rpe(&moved, &r, 2).unwrap());
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
    }

    fn table(rows: &[(&str, &[f64])]) -> BTreeMap<String, BTreeMap<String, f64>> {
        rows.iter()
            .map(|(m, vals)| {
                (
                    m.to_string(),
                    vals.iter()
                        .enumerate()
                        .map(|(k, v)| (format!("s{k:02}"), *v))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn win_rate_cases() {
        let w = win_rate(&table(&[("a", &[1.0]), ("b", &[2.0]), ("c", &[3.0])])).unwrap();
        assert_eq!((w["a"], w["b"], w["c"]), (1.0, 0.0, 0.0));
        let w = win_rate(&table(&[("a", &[1.0, 1.0]), ("b", &[1.0, 2.0])])).unwrap();
        assert_eq!((w["a"], w["b"]), (0.75, 0.25));
        let always = [0.1; 25];
        let never = [0.2; 25];
        let w = win_rate(&table(&[("a", &always), ("b", &never)])).unwrap();
        assert_eq!(w["a"] * 25.0, 25.0);
        let mut t = table(&[("a", &[1.0, 2.0]), ("b", &[1.0, 2.0])]);
        t.get_mut("b").unwrap().remove("s01");
        assert!(matches!(win_rate(&t), Err(Error::MissingScene { .. })));
    }

    #[test]
    fn bins_cases() {
        let anti: Vec<(f64, f64)> = (0..103).map(|k| (k as f64, 200.0 - k as f64)).collect();
        let s = confidence_bins(&anti, 5, Component::Rotation).unwrap();
        assert!(s.strictly_decreasing());
        let counts: Vec<usize> = s.bins.iter().map(|b| b.count).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(counts.iter().sum::<usize>(), 103);

        let flat: Vec<(f64, f64)> = (0..50).map(|k| (k as f64, 0.3)).collect();
        let s = confidence_bins(&flat, 5, Component::Translation).unwrap();
        assert!(s.bins.iter().all(|b| (b.mean_error - 0.3).abs() < 1e-15));

        let one = confidence_bins(&anti, 1, Component::Rotation).unwrap();
        let mean = anti.iter().map(|s| s.1).sum::<f64>() / 103.0;
        assert!((one.bins[0].mean_error - mean).abs() < 1e-12);
        assert!(confidence_bins(&anti[..3], 5, Component::Rotation).is_err());
    }

    fn plan(labels: &[bool]) -> FramePlan {
        FramePlan {
            entries: labels
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    let id = FrameId(k as u64 + 1);
                    PlanEntry {
                        id,
                        source: if *d {
                            FrameSource::Distractor(id)
                        } else {
                            FrameSource::Clean(id)
                        },
                    }
                })
                .collect(),
        }
    }

    fn decision(frame: u64, accept: bool) -> StreamEvent {
        StreamEvent {
            frame: FrameId(frame),
            kind: if accept {
                EventKind::Accepted { pose: [0.0; 7] }
            } else {
                EventKind::Rejected { threshold: 0.0 }
            },
            score: None,
            bank_size: 0,
        }
    }

    #[test]
    fn robustness_cases() {
        let mut labels = vec![false; 30];
        labels.extend([true; 10]);
        let p = plan(&labels);
        let perfect: Vec<_> = labels.iter().enumerate().map(|(k, d)| decision(k as u64 + 1, !d)).collect();
        let r = robustness_score(&perfect, &p).unwrap();
        assert_eq!((r.sr, r.bfs), (1.0, 1.0));

        let all_rej: Vec<_> = (1..=40).map(|k| decision(k, false)).collect();
        let r = robustness_score(&all_rej, &p).unwrap();
        assert_eq!((r.sr, r.clean_accept, r.bfs), (1.0, 0.0, 0.5));

        let half: Vec<_> = labels
            .iter()
            .enumerate()
            .map(|(k, d)| decision(k as u64 + 1, !d || k % 2 == 0))
            .collect();
        let r = robustness_score(&half, &p).unwrap();
        assert_eq!((r.sr, r.bfs), (0.5, 0.75));

        assert!(matches!(
            robustness_score(&perfect[..39], &p),
            Err(Error::PlanMismatch(_))
        ));
        let r = robustness_score(&perfect[..30], &plan(&[false; 30])).unwrap();
        assert_eq!(r.sr, 1.0);
    }
}

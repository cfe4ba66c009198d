//! Synthetic stand-in for the pairwise pose head.
//!
//! A scene is a ground-truth camera trajectory plus a random-feature token
//! embedding. Edges are the true relative poses perturbed by Laplace noise
//! whose scale grows with frame gap and baseline:
//!
//! `b(gap, baseline) = b0 * (1 + gamma * gap) * (1 + baseline)`
//!
//! and carry the confidence `alpha / b`, the minimizer of the expected
//! confidence-weighted L1 loss `c * E|e| - alpha * log c` when `E|e| = b`.
//! Every draw is keyed on `(seed, src, dst)`, so querying an edge twice yields
//! the same prediction.

use crate::error::{Error, Result};
use crate::geom::{Pose, UnitQuaternion, Vec3};
use crate::posegraph::{FrameId, PoseEdge};
use crate::stream::FrameToken;
use nalgebra::Matrix3;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryFamily {
    Circle,
    RandomWalk,
    FigureEight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub family: TrajectoryFamily,
    pub frames: usize,
    /// Maximum distance between consecutive random-walk frames.
    pub step: f64,
    /// Circle radius, or half-width of the figure eight.
    pub radius: f64,
    /// Heading change scale per random-walk step, radians.
    pub turn_rate: f64,
    /// Base Laplace scale of rotation noise per axis-angle component, radians.
    pub rot_noise: f64,
    /// Base Laplace scale of translation noise per component.
    pub trans_noise: f64,
    /// Relative noise growth per frame of gap.
    pub gap_growth: f64,
    /// Noise scales are clamped below by this value.
    pub min_noise: f64,
    pub token_dim: usize,
    pub token_length_scale: f64,
    /// Weight of the viewing direction relative to position in the token.
    pub token_view_weight: f64,
    /// Confidence regularizer weight of the training loss.
    pub alpha: f64,
    /// Log-normal sigma of multiplicative confidence jitter; 0 disables it.
    pub conf_jitter: f64,
    /// Log-normal sigma of metric depth summaries; 0 gives exact scale.
    pub depth_jitter: f64,
    /// Noise multiplier for edges involving distractor frames.
    pub distractor_noise: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            family: TrajectoryFamily::RandomWalk,
            frames: 100,
            step: 0.1,
            radius: 3.0,
            turn_rate: 0.15,
            rot_noise: 0.02,
            trans_noise: 0.05,
            gap_growth: 0.01,
            min_noise: 1e-9,
            token_dim: 64,
            token_length_scale: 1.5,
            token_view_weight: 1.0,
            alpha: 0.2,
            conf_jitter: 0.0,
            depth_jitter: 0.0,
            distractor_noise: 10.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step", self.step),
            ("radius", self.radius),
            ("rot_noise", self.rot_noise),
            ("trans_noise", self.trans_noise),
            ("min_noise", self.min_noise),
            ("token_length_scale", self.token_length_scale),
            ("alpha", self.alpha),
            ("distractor_noise", self.distractor_noise),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("turn_rate", self.turn_rate),
            ("gap_growth", self.gap_growth),
            ("token_view_weight", self.token_view_weight),
            ("conf_jitter", self.conf_jitter),
            ("depth_jitter", self.depth_jitter),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.frames < 2 {
            return Err(Error::InvalidConfig(format!(
                "a scene needs at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.token_dim == 0 {
            return Err(Error::InvalidConfig("token_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Random Fourier features approximating a Gaussian kernel on
/// `(position, view_weight * forward)`.
#[derive(Debug, Clone, PartialEq)]
struct TokenBasis {
    freqs: Vec<[f64; 6]>,
    phases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    config: OracleConfig,
    seed: u64,
    poses: Vec<Pose>,
    basis: TokenBasis,
}

/// Tags separating independent random streams derived from one seed.
mod tag {
    pub const GEOMETRY: u64 = 0x6765_6f6d;
    pub const TOKENS: u64 = 0x746f_6b6e;
    pub const EDGES: u64 = 0x6564_6765;
    pub const DISTRACTOR_EDGES: u64 = 0x6469_7374;
    pub const DEPTH: u64 = 0x6465_7074;
    pub const PLAN: u64 = 0x706c_616e;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a root seed and a list of keys.
pub fn derive_seed(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(root), |acc, k| splitmix(acc ^ splitmix(*k)))
}

fn rng_for(root: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, keys))
}

fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
    -scale * u.signum() * tail.ln()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Camera-to-world rotation whose optical axis (+z) points along `forward`,
/// with the camera's y axis pointing as close to world -z as possible.
fn look_rotation(forward: &Vec3) -> UnitQuaternion {
    let z = forward.normalize();
    let down = -Vec3::z();
    let mut x = down.cross(&z);
    if x.norm() < 1e-9 {
        x = Vec3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    UnitQuaternion::from_matrix(&Matrix3::from_columns(&[x, y, z]))
}

fn circle_poses(n: usize, radius: f64) -> Vec<Pose> {
    (0..n)
        .map(|k| {
            let th = TAU * k as f64 / n as f64;
            let pos = Vec3::new(radius * th.cos(), radius * th.sin(), 0.0);
            let tangent = Vec3::new(-th.sin(), th.cos(), 0.0);
            Pose::new(look_rotation(&tangent), pos)
        })
        .collect()
}

fn figure_eight_poses(n: usize, radius: f64) -> Vec<Pose> {
    (0..n)
        .map(|k| {
            let th = TAU * k as f64 / n as f64;
            let pos = Vec3::new(
                radius * th.sin(),
                radius * th.sin() * th.cos(),
                0.1 * radius * th.sin(),
            );
            let tangent = Vec3::new(
                radius * th.cos(),
                radius * (2.0 * th).cos(),
                0.1 * radius * th.cos(),
            );
            Pose::new(look_rotation(&tangent), pos)
        })
        .collect()
}

fn random_walk_poses(config: &OracleConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let mut yaw: f64 = rng.random_range(0.0..TAU);
    let mut pitch = 0.0f64;
    let mut pos = Vec3::zeros();
    let mut out = Vec::with_capacity(config.frames);
    for k in 0..config.frames {
        let forward = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
        if k > 0 {
            let len = config.step * rng.random_range(0.5..=1.0);
            pos += forward * len;
        }
        out.push(Pose::new(look_rotation(&forward), pos));
        yaw += config.turn_rate * normal(rng);
        pitch = (0.9 * pitch + 0.3 * config.turn_rate * normal(rng)).clamp(-0.4, 0.4);
    }
    out
}

pub fn generate_scene(config: &OracleConfig, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut geo = rng_for(seed, &[tag::GEOMETRY]);
    let poses = match config.family {
        TrajectoryFamily::Circle => circle_poses(config.frames, config.radius),
        TrajectoryFamily::FigureEight => figure_eight_poses(config.frames, config.radius),
        TrajectoryFamily::RandomWalk => random_walk_poses(config, &mut geo),
    };
    let mut trng = rng_for(seed, &[tag::TOKENS]);
    let inv_ls = 1.0 / config.token_length_scale;
    let freqs = (0..config.token_dim)
        .map(|_| std::array::from_fn(|_| normal(&mut trng) * inv_ls))
        .collect();
    let phases = (0..config.token_dim)
        .map(|_| trng.random_range(0.0..TAU))
        .collect();
    Ok(SyntheticScene {
        config: config.clone(),
        seed,
        poses,
        basis: TokenBasis { freqs, phases },
    })
}

impl SyntheticScene {
    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Frame ids `1..=len`.
    pub fn frame_ids(&self) -> impl Iterator<Item = FrameId> + '_ {
        (1..=self.poses.len() as u64).map(FrameId)
    }

    pub fn pose(&self, id: FrameId) -> Result<&Pose> {
        id.0.checked_sub(1)
            .and_then(|k| self.poses.get(k as usize))
            .ok_or(Error::UnknownFrame(id))
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Ground-truth trajectory keyed by frame id.
    pub fn trajectory(&self) -> std::collections::BTreeMap<FrameId, Pose> {
        self.frame_ids().zip(self.poses.iter().copied()).collect()
    }

    /// Laplace scales `(b_R, b_T)` of the edge `i -> j`.
    pub fn noise_scales(&self, i: FrameId, j: FrameId) -> Result<(f64, f64)> {
        let gap = i.0.abs_diff(j.0) as f64;
        let baseline = (self.pose(j)?.translation - self.pose(i)?.translation).norm();
        let growth = (1.0 + self.config.gap_growth * gap) * (1.0 + baseline);
        Ok((
            (self.config.rot_noise * growth).max(self.config.min_noise),
            (self.config.trans_noise * growth).max(self.config.min_noise),
        ))
    }

    fn noisy_edge(
        &self,
        src: FrameId,
        dst: FrameId,
        geometry: (FrameId, FrameId),
        noise_factor: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<PoseEdge> {
        let (a, b) = geometry;
        let truth = self.pose(a)?.relative(self.pose(b)?);
        let (br, bt) = self.noise_scales(a, b)?;
        let (br, bt) = (br * noise_factor, bt * noise_factor);
        let omega = Vec3::new(laplace(rng, br), laplace(rng, br), laplace(rng, br));
        let noise = Vec3::new(laplace(rng, bt), laplace(rng, bt), laplace(rng, bt));
        let rel = Pose::new(
            truth.rotation.multiply(&UnitQuaternion::from_rotation_vector(&omega)),
            truth.translation + noise,
        );
        let (jr, jt) = if self.config.conf_jitter > 0.0 {
            (
                (self.config.conf_jitter * normal(rng)).exp(),
                (self.config.conf_jitter * normal(rng)).exp(),
            )
        } else {
            (1.0, 1.0)
        };
        PoseEdge::new(
            src,
            dst,
            rel,
            self.config.alpha / br * jr,
            self.config.alpha / bt * jt,
        )
    }

    /// Noisy, confidence-carrying prediction of the relative pose `i -> j`.
    pub fn emit_edge(&self, i: FrameId, j: FrameId) -> Result<PoseEdge> {
        if i == j {
            return Err(Error::DegenerateInput(format!("self edge on frame {i}")));
        }
        let mut rng = rng_for(self.seed, &[tag::EDGES, i.0, j.0]);
        self.noisy_edge(i, j, (i, j), 1.0, &mut rng)
    }

    /// Unit-norm token; cosine similarity decays with pose distance.
    pub fn emit_token(&self, i: FrameId) -> Result<FrameToken> {
        self.token_as(i, i)
    }

    fn token_as(&self, frame: FrameId, id: FrameId) -> Result<FrameToken> {
        let p = self.pose(frame)?;
        let fwd = p.rotation.rotate(&Vec3::z()) * self.config.token_view_weight;
        let x = [
            p.translation.x,
            p.translation.y,
            p.translation.z,
            fwd.x,
            fwd.y,
            fwd.z,
        ];
        let features = self
            .basis
            .freqs
            .iter()
            .zip(&self.basis.phases)
            .map(|(w, b)| (w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b).cos())
            .collect();
        FrameToken::new(id, features)
    }

    /// `(predicted, metric)` depth medians for a frame. The predicted summary
    /// is exact; the metric one carries optional log-normal jitter.
    pub fn depth_summaries(&self, i: FrameId) -> Result<(f64, f64)> {
        let p = self.pose(i)?;
        let predicted = 2.0 + 0.5 * (p.translation.x + p.translation.y).sin();
        let metric = if self.config.depth_jitter > 0.0 {
            let mut rng = rng_for(self.seed, &[tag::DEPTH, i.0]);
            predicted * (self.config.depth_jitter * normal(&mut rng)).exp()
        } else {
            predicted
        };
        Ok((predicted, metric))
    }

    /// Writes the trajectory in TUM format plus a JSON sidecar holding the
    /// generator config and seed.
    pub fn dump<W1: Write, W2: Write>(&self, trajectory: W1, sidecar: W2) -> Result<()> {
        crate::tum::write_tum(trajectory, &self.trajectory())?;
        let record = SceneRecord {
            seed: self.seed,
            config: self.config.clone(),
        };
        serde_json::to_writer_pretty(sidecar, &record).map_err(std::io::Error::other)?;
        Ok(())
    }

    /// Regenerates a scene from its sidecar and checks it against the dumped
    /// trajectory.
    pub fn load<R1: BufRead, R2: BufRead>(trajectory: R1, sidecar: R2) -> Result<Self> {
        let record: SceneRecord =
            serde_json::from_reader(sidecar).map_err(|e| Error::parse(0, e.to_string()))?;
        let scene = generate_scene(&record.config, record.seed)?;
        let dumped = crate::tum::read_tum(trajectory)?;
        if dumped.len() != scene.len() {
            return Err(Error::MismatchedIds);
        }
        for (id, p) in &dumped {
            let q = scene.pose(*id)?;
            if (p.translation - q.translation).norm() > 1e-9
                || p.rotation.geodesic_rad(&q.rotation) > 1e-9
            {
                return Err(Error::InvalidConfig(format!(
                    "dumped pose of frame {id} does not match the regenerated scene"
                )));
            }
        }
        Ok(scene)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    seed: u64,
    config: OracleConfig,
}

pub fn emit_edge(scene: &SyntheticScene, i: FrameId, j: FrameId) -> Result<PoseEdge> {
    scene.emit_edge(i, j)
}

pub fn emit_token(scene: &SyntheticScene, i: FrameId) -> Result<FrameToken> {
    scene.emit_token(i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "frame", rename_all = "kebab-case")]
pub enum FrameSource {
    Clean(FrameId),
    Distractor(FrameId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Position in the stream, starting at 1.
    pub id: FrameId,
    pub source: FrameSource,
}

impl PlanEntry {
    pub fn is_distractor(&self) -> bool {
        matches!(self.source, FrameSource::Distractor(_))
    }
}

/// Interleaved stream of clean and distractor frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub entries: Vec<PlanEntry>,
}

impl FramePlan {
    /// Every frame of `scene`, in order.
    pub fn clean(scene: &SyntheticScene) -> Self {
        Self {
            entries: scene
                .frame_ids()
                .map(|f| PlanEntry {
                    id: f,
                    source: FrameSource::Clean(f),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: FrameId) -> Option<&PlanEntry> {
        id.0.checked_sub(1)
            .and_then(|k| self.entries.get(k as usize))
            .filter(|e| e.id == id)
    }

    pub fn distractor_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_distractor()).count()
    }
}

/// Interleaves `n_distract` frames of `other` into the first `n_clean` frames
/// of `scene`. Clean order is preserved, the first three positions are clean,
/// and distractor positions are drawn uniformly from the rest.
pub fn make_distractor_stream(
    scene: &SyntheticScene,
    other: &SyntheticScene,
    n_clean: usize,
    n_distract: usize,
    seed: u64,
) -> Result<FramePlan> {
    if n_clean < 3 {
        return Err(Error::InvalidCounts(format!(
            "need at least 3 clean frames, got {n_clean}"
        )));
    }
    if n_clean > scene.len() {
        return Err(Error::InvalidCounts(format!(
            "scene has {} frames, {n_clean} clean frames requested",
            scene.len()
        )));
    }
    if n_distract > other.len() {
        return Err(Error::InvalidCounts(format!(
            "distractor scene has {} frames, {n_distract} requested",
            other.len()
        )));
    }
    if n_distract > 0 && scene.seed == other.seed && scene.config == other.config {
        return Err(Error::InvalidCounts(
            "distractors must come from a different scene".into(),
        ));
    }

    let mut rng = rng_for(seed, &[tag::PLAN]);
    let total = n_clean + n_distract;
    // Choose distractor slots among positions 3..total.
    let mut slots: Vec<usize> = (3..total).collect();
    shuffle(&mut slots, &mut rng);
    let mut is_distractor = vec![false; total];
    for &s in slots.iter().take(n_distract) {
        is_distractor[s] = true;
    }
    let mut pool: Vec<u64> = (1..=other.len() as u64).collect();
    shuffle(&mut pool, &mut rng);

    let mut clean = 1u64;
    let mut distract = pool.into_iter();
    let entries = is_distractor
        .into_iter()
        .enumerate()
        .map(|(pos, d)| {
            let source = if d {
                FrameSource::Distractor(FrameId(distract.next().expect("pool sized above")))
            } else {
                clean += 1;
                FrameSource::Clean(FrameId(clean - 1))
            };
            PlanEntry {
                id: FrameId(pos as u64 + 1),
                source,
            }
        })
        .collect();
    Ok(FramePlan { entries })
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Source of tokens and pairwise edges for a stream of frames.
pub trait EdgeProvider {
    fn token(&self, frame: FrameId) -> Result<FrameToken>;
    fn edge(&self, src: FrameId, dst: FrameId) -> Result<PoseEdge>;

    /// `(predicted, metric)` depth medians used to anchor segment scale.
    fn depth_summaries(&self, _frame: FrameId) -> Result<Option<(f64, f64)>> {
        Ok(None)
    }
}

impl EdgeProvider for SyntheticScene {
    fn token(&self, frame: FrameId) -> Result<FrameToken> {
        self.emit_token(frame)
    }

    fn edge(&self, src: FrameId, dst: FrameId) -> Result<PoseEdge> {
        self.emit_edge(src, dst)
    }

    fn depth_summaries(&self, frame: FrameId) -> Result<Option<(f64, f64)>> {
        SyntheticScene::depth_summaries(self, frame).map(Some)
    }
}

/// Oracle view of an interleaved plan. Edges between clean frames come from
/// the clean scene; any edge touching a distractor is the distractor scene's
/// geometry with noise scales multiplied by `distractor_noise`, hence low
/// confidence.
#[derive(Debug, Clone, Copy)]
pub struct PlannedStream<'a> {
    pub scene: &'a SyntheticScene,
    pub other: &'a SyntheticScene,
    pub plan: &'a FramePlan,
}

impl PlannedStream<'_> {
    fn source(&self, id: FrameId) -> Result<FrameSource> {
        self.plan
            .get(id)
            .map(|e| e.source)
            .ok_or(Error::UnknownFrame(id))
    }

    /// Neighbor of `f` in `other`, used as the geometric partner of a
    /// distractor edge.
    fn neighbor(&self, f: FrameId) -> FrameId {
        if f.0 > 1 {
            FrameId(f.0 - 1)
        } else {
            FrameId(2)
        }
    }
}

impl EdgeProvider for PlannedStream<'_> {
    fn token(&self, frame: FrameId) -> Result<FrameToken> {
        match self.source(frame)? {
            FrameSource::Clean(f) => self.scene.token_as(f, frame),
            FrameSource::Distractor(f) => self.other.token_as(f, frame),
        }
    }

    fn edge(&self, src: FrameId, dst: FrameId) -> Result<PoseEdge> {
        match (self.source(src)?, self.source(dst)?) {
            (FrameSource::Clean(a), FrameSource::Clean(b)) => {
                let mut rng = rng_for(self.scene.seed, &[tag::EDGES, a.0, b.0]);
                self.scene.noisy_edge(src, dst, (a, b), 1.0, &mut rng)
            }
            (s, d) => {
                let factor = self.other.config.distractor_noise;
                let mut rng = rng_for(self.other.seed, &[tag::DISTRACTOR_EDGES, src.0, dst.0]);
                let geometry = match (s, d) {
                    (FrameSource::Distractor(a), FrameSource::Distractor(b)) if a != b => (a, b),
                    (FrameSource::Distractor(a), _) => (a, self.neighbor(a)),
                    (_, FrameSource::Distractor(b)) => (self.neighbor(b), b),
                    _ => unreachable!("clean pair handled above"),
                };
                self.other.noisy_edge(src, dst, geometry, factor, &mut rng)
            }
        }
    }

    fn depth_summaries(&self, frame: FrameId) -> Result<Option<(f64, f64)>> {
        match self.source(frame)? {
            FrameSource::Clean(f) => self.scene.depth_summaries(f).map(Some),
            FrameSource::Distractor(f) => self.other.depth_summaries(f).map(Some),
        }
    }
}

/// Rotation of `angle` about a random axis; test and generator helper.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> UnitQuaternion {
    let axis = Vec3::new(normal(rng), normal(rng), normal(rng));
    let angle = rng.random_range(0.0..=max_angle.min(PI));
    UnitQuaternion::from_axis_angle(&axis, angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn config(family: TrajectoryFamily, frames: usize) -> OracleConfig {
        OracleConfig {
            family,
            frames,
            ..OracleConfig::default()
        }
    }

    #[test]
    fn circle_of_four_frames() {
        let s = generate_scene(
            &OracleConfig {
                radius: 1.0,
                ..config(TrajectoryFamily::Circle, 4)
            },
            0,
        )
        .unwrap();
        for (k, p) in s.poses().iter().enumerate() {
            let th = FRAC_PI_2 * k as f64;
            assert!((p.translation - Vec3::new(th.cos(), th.sin(), 0.0)).norm() < 1e-12);
            let fwd = p.rotation.rotate(&Vec3::z());
            assert!((fwd - Vec3::new(-th.sin(), th.cos(), 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let c = config(TrajectoryFamily::RandomWalk, 50);
        assert_eq!(generate_scene(&c, 7).unwrap(), generate_scene(&c, 7).unwrap());
        assert_ne!(generate_scene(&c, 7).unwrap(), generate_scene(&c, 8).unwrap());
    }

    #[test]
    fn random_walk_baselines_bounded() {
        let c = config(TrajectoryFamily::RandomWalk, 1000);
        let s = generate_scene(&c, 3).unwrap();
        let max = s
            .poses()
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .fold(0.0, f64::max);
        assert!(s.poses().iter().all(|p| p.translation.iter().all(|v| v.is_finite())));
        assert!(max <= c.step + 1e-12, "{max}");
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_scene(&config(TrajectoryFamily::Circle, 1), 0).is_err());
        let c = OracleConfig {
            alpha: 0.0,
            ..OracleConfig::default()
        };
        assert!(matches!(generate_scene(&c, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_noise_edges_are_exact() {
        let c = OracleConfig {
            rot_noise: 1e-300,
            trans_noise: 1e-300,
            min_noise: 1e-12,
            ..config(TrajectoryFamily::FigureEight, 20)
        };
        let s = generate_scene(&c, 1).unwrap();
        let e = s.emit_edge(FrameId(3), FrameId(9)).unwrap();
        let truth = s.pose(FrameId(3)).unwrap().relative(s.pose(FrameId(9)).unwrap());
        assert!((e.rel_translation - truth.translation).norm() < 1e-10);
        assert!(e.rel_rotation.geodesic_rad(&truth.rotation) < 1e-10);
        assert!((e.conf_trans - 0.2 / 1e-12).abs() / e.conf_trans < 1e-12);
    }

    #[test]
    fn confidence_is_alpha_over_scale() {
        let c = OracleConfig {
            trans_noise: 0.1,
            gap_growth: 0.0,
            ..config(TrajectoryFamily::Circle, 10)
        };
        let s = generate_scene(&c, 1).unwrap();
        let (_, bt) = s.noise_scales(FrameId(1), FrameId(2)).unwrap();
        let e = s.emit_edge(FrameId(1), FrameId(2)).unwrap();
        assert!((e.conf_trans - 0.2 / bt).abs() < 1e-12);
        // Pure gap dependence with the baseline factor removed.
        let d = OracleConfig {
            radius: 1e-9,
            ..c
        };
        let s = generate_scene(&d, 1).unwrap();
        let e = s.emit_edge(FrameId(1), FrameId(2)).unwrap();
        assert!((e.conf_trans - 2.0).abs() < 1e-6);
    }

    #[test]
    fn long_gaps_are_less_confident() {
        let s = generate_scene(&config(TrajectoryFamily::RandomWalk, 60), 2).unwrap();
        let near = s.emit_edge(FrameId(5), FrameId(6)).unwrap();
        let far = s.emit_edge(FrameId(5), FrameId(55)).unwrap();
        assert!(far.conf_rot < near.conf_rot);
        assert!(far.conf_trans < near.conf_trans);
    }

    #[test]
    fn edges_are_reproducible_and_direction_specific() {
        let s = generate_scene(&config(TrajectoryFamily::RandomWalk, 20), 2).unwrap();
        let a = s.emit_edge(FrameId(2), FrameId(7)).unwrap();
        assert_eq!(a, s.emit_edge(FrameId(2), FrameId(7)).unwrap());
        let b = s.emit_edge(FrameId(7), FrameId(2)).unwrap();
        assert_ne!(a.rel_translation, -b.rel_translation);
        assert!(matches!(
            s.emit_edge(FrameId(2), FrameId(99)),
            Err(Error::UnknownFrame(FrameId(99)))
        ));
        assert!(s.emit_token(FrameId(0)).is_err());
    }

    #[test]
    fn token_similarity_behaviour() {
        let s = generate_scene(&config(TrajectoryFamily::RandomWalk, 100), 5).unwrap();
        let t = s.emit_token(FrameId(10)).unwrap();
        assert!((t.cosine(&t) - 1.0).abs() < 1e-12);
        let norm: f64 = t.features().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distractor_plan_shapes() {
        let a = generate_scene(&config(TrajectoryFamily::RandomWalk, 40), 1).unwrap();
        let b = generate_scene(&config(TrajectoryFamily::RandomWalk, 60), 2).unwrap();
        let plan = make_distractor_stream(&a, &b, 30, 0, 9).unwrap();
        assert_eq!(
            plan.entries,
            FramePlan::clean(&a).entries[..30].to_vec()
        );
        for (nc, nd) in [(30, 10), (30, 30), (30, 50), (14, 5), (14, 14), (14, 30)] {
            let plan = make_distractor_stream(&a, &b, nc, nd, 4).unwrap();
            assert_eq!(plan.len(), nc + nd);
            assert_eq!(plan.distractor_count(), nd);
            assert!(plan.entries[..3].iter().all(|e| !e.is_distractor()));
            let clean: Vec<u64> = plan
                .entries
                .iter()
                .filter_map(|e| match e.source {
                    FrameSource::Clean(f) => Some(f.0),
                    _ => None,
                })
                .collect();
            assert_eq!(clean, (1..=nc as u64).collect::<Vec<_>>());
        }
        assert!(matches!(
            make_distractor_stream(&a, &b, 2, 5, 0),
            Err(Error::InvalidCounts(_))
        ));
        assert!(make_distractor_stream(&a, &a, 10, 5, 0).is_err());
    }

    #[test]
    fn distractor_edges_have_low_confidence() {
        let a = generate_scene(&config(TrajectoryFamily::RandomWalk, 40), 1).unwrap();
        let b = generate_scene(&config(TrajectoryFamily::RandomWalk, 60), 2).unwrap();
        let plan = make_distractor_stream(&a, &b, 30, 30, 4).unwrap();
        let view = PlannedStream {
            scene: &a,
            other: &b,
            plan: &plan,
        };
        let d = plan.entries.iter().find(|e| e.is_distractor()).unwrap().id;
        let clean = view.edge(FrameId(1), FrameId(2)).unwrap();
        let bad = view.edge(FrameId(1), d).unwrap();
        assert!(bad.mean_conf() < 0.15 * clean.mean_conf());
        assert_eq!(view.token(d).unwrap().id, d);
    }

    #[test]
    fn scene_dump_and_load() {
        let s = generate_scene(&config(TrajectoryFamily::FigureEight, 12), 11).unwrap();
        let (mut traj, mut side) = (Vec::new(), Vec::new());
        s.dump(&mut traj, &mut side).unwrap();
        let back = SyntheticScene::load(traj.as_slice(), side.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn depth_summaries_exact_without_jitter() {
        let s = generate_scene(&config(TrajectoryFamily::Circle, 8), 0).unwrap();
        let (p, m) = s.depth_summaries(FrameId(3)).unwrap();
        assert!(p > 0.0);
        assert_eq!(p, m);
    }
}

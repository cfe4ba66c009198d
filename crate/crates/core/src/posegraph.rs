//! Directed relative-pose graph: edges, candidate composition and
//! confidence-weighted fusion of candidates into one absolute pose.

use crate::error::{Error, Result};
use crate::geom::{Pose, UnitQuaternion, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct FrameId(pub u64);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for FrameId {
    fn from(v: u64) -> Self {
        FrameId(v)
    }
}

/// One directed pairwise prediction `src -> dst`.
///
/// The translation is expressed in `src`'s camera frame, so that
/// `pose_dst = pose_src * (rel_rotation, rel_translation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEdge {
    pub src: FrameId,
    pub dst: FrameId,
    pub rel_rotation: UnitQuaternion,
    pub rel_translation: Vec3,
    pub conf_rot: f64,
    pub conf_trans: f64,
}

impl PoseEdge {
    pub fn new(
        src: FrameId,
        dst: FrameId,
        relative: Pose,
        conf_rot: f64,
        conf_trans: f64,
    ) -> Result<Self> {
        if src == dst {
            return Err(Error::DegenerateInput(format!("self edge on frame {src}")));
        }
        for (name, c) in [("rotation", conf_rot), ("translation", conf_trans)] {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::DegenerateInput(format!(
                    "edge {src}->{dst}: {name} confidence must be positive and finite, got {c}"
                )));
            }
        }
        Ok(Self {
            src,
            dst,
            rel_rotation: relative.rotation,
            rel_translation: relative.translation,
            conf_rot,
            conf_trans,
        })
    }

    pub fn relative_pose(&self) -> Pose {
        Pose::new(self.rel_rotation, self.rel_translation)
    }

    /// Averaged pair confidence `(c_R + c_T) / 2`.
    pub fn mean_conf(&self) -> f64 {
        0.5 * (self.conf_rot + self.conf_trans)
    }
}

/// Absolute pose for a target frame proposed by one reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePose {
    pub proposed: Pose,
    pub conf_rot: f64,
    pub conf_trans: f64,
    pub reference: FrameId,
}

impl CandidatePose {
    pub fn mean_conf(&self) -> f64 {
        0.5 * (self.conf_rot + self.conf_trans)
    }
}

pub fn compose_candidate(ref_pose: &Pose, edge: &PoseEdge) -> CandidatePose {
    compose_candidate_scaled(ref_pose, edge, 1.0)
}

/// Like [`compose_candidate`] with the edge translation multiplied by
/// `scale` first (segment scale anchoring).
pub fn compose_candidate_scaled(ref_pose: &Pose, edge: &PoseEdge, scale: f64) -> CandidatePose {
    CandidatePose {
        proposed: Pose {
            rotation: ref_pose.rotation.multiply(&edge.rel_rotation),
            translation: ref_pose.translation
                + ref_pose.rotation.rotate(&(edge.rel_translation * scale)),
        },
        conf_rot: edge.conf_rot,
        conf_trans: edge.conf_trans,
        reference: edge.src,
    }
}

/// Number of references retained by fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    All,
    K(usize),
}

impl TopK {
    pub fn retain_count(&self, available: usize) -> usize {
        match *self {
            TopK::All => available,
            TopK::K(k) => k.min(available),
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(TopK::K(k)),
            _ => Err(Error::InvalidConfig(format!(
                "k must be a positive integer or \"all\", got {s:?}"
            ))),
        }
    }
}

impl Serialize for TopK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("k must be positive")),
            Raw::Int(k) => Ok(TopK::K(k as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How retained candidates are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Softmax over the raw confidences, temperature 1.
    #[default]
    Softmax,
    /// Softmax over log-confidences, i.e. weights proportional to confidence.
    SoftmaxLog,
    /// Equal weights regardless of confidence.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub k: TopK,
    pub weighting: Weighting,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: TopK::All,
            weighting: Weighting::Softmax,
        }
    }
}

/// Fused pose plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fused {
    pub pose: Pose,
    pub retained: usize,
    /// The weighted quaternion sum vanished and the rotation fell back to the
    /// sign-alignment reference.
    pub degenerate_rotation: bool,
}

/// Confidence-weighted fusion with softmax weights over the top-`k`
/// candidates.
pub fn fuse_candidates(candidates: &[CandidatePose], k: TopK) -> Result<Pose> {
    fuse_candidates_with(
        candidates,
        &FusionConfig {
            k,
            weighting: Weighting::Softmax,
        },
    )
    .map(|f| f.pose)
}

pub fn fuse_candidates_with(candidates: &[CandidatePose], config: &FusionConfig) -> Result<Fused> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut ranked: Vec<&CandidatePose> = candidates.iter().collect();
    ranked.sort_by(|a, b| {
        b.mean_conf()
            .total_cmp(&a.mean_conf())
            .then(a.reference.cmp(&b.reference))
    });
    ranked.truncate(config.k.retain_count(ranked.len()));

    let w_rot = weights(ranked.iter().map(|c| c.conf_rot), config.weighting);
    let w_trans = weights(ranked.iter().map(|c| c.conf_trans), config.weighting);

    let translation = ranked
        .iter()
        .zip(&w_trans)
        .fold(Vec3::zeros(), |acc, (c, w)| acc + c.proposed.translation * *w);

    let anchor = ranked
        .iter()
        .min_by(|a, b| {
            b.conf_rot
                .total_cmp(&a.conf_rot)
                .then(a.reference.cmp(&b.reference))
        })
        .expect("at least one retained candidate")
        .proposed
        .rotation;
    let mut sum = [0.0f64; 4];
    for (c, w) in ranked.iter().zip(&w_rot) {
        let q = c.proposed.rotation.aligned_to(&anchor).coords();
        for (s, v) in sum.iter_mut().zip(q) {
            *s += w * v;
        }
    }
    let (rotation, degenerate_rotation) = match UnitQuaternion::new(sum[0], sum[1], sum[2], sum[3])
    {
        Ok(q) if sum.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-9 => (q, false),
        _ => (anchor, true),
    };

    Ok(Fused {
        pose: Pose::new(rotation, translation),
        retained: ranked.len(),
        degenerate_rotation,
    })
}

fn weights(conf: impl Iterator<Item = f64>, weighting: Weighting) -> Vec<f64> {
    let logits: Vec<f64> = match weighting {
        Weighting::Softmax => conf.collect(),
        Weighting::SoftmaxLog => conf.map(f64::ln).collect(),
        Weighting::Uniform => conf.map(|_| 0.0).collect(),
    };
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Sources of `edges_into_j`, descending by averaged confidence, ties broken
/// by ascending source id, truncated to `k`.
pub fn rank_references(edges_into_j: &[PoseEdge], k: TopK) -> Vec<FrameId> {
    let mut ranked: Vec<&PoseEdge> = edges_into_j.iter().collect();
    ranked.sort_by(|a, b| b.mean_conf().total_cmp(&a.mean_conf()).then(a.src.cmp(&b.src)));
    ranked
        .into_iter()
        .take(k.retain_count(edges_into_j.len()))
        .map(|e| e.src)
        .collect()
}

/// Directed edges, at most one per ordered pair.
#[derive(Debug, Clone, Default)]
pub struct EdgeStore {
    edges: BTreeMap<(FrameId, FrameId), PoseEdge>,
    incoming: BTreeMap<FrameId, BTreeSet<FrameId>>,
}

impl EdgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `edge`, returning the edge it replaced for the same ordered pair.
    pub fn insert(&mut self, edge: PoseEdge) -> Option<PoseEdge> {
        self.incoming.entry(edge.dst).or_default().insert(edge.src);
        self.edges.insert((edge.src, edge.dst), edge)
    }

    pub fn get(&self, src: FrameId, dst: FrameId) -> Option<&PoseEdge> {
        self.edges.get(&(src, dst))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges in `(src, dst)` order.
    pub fn iter(&self) -> impl Iterator<Item = &PoseEdge> {
        self.edges.values()
    }

    /// All edges into `dst` whose source passes `from`, ordered by source id.
    pub fn edges_into<F>(&self, dst: FrameId, mut from: F) -> Vec<&PoseEdge>
    where
        F: FnMut(FrameId) -> bool,
    {
        self.incoming
            .get(&dst)
            .into_iter()
            .flatten()
            .filter(|src| from(**src))
            .filter_map(|src| self.edges.get(&(*src, dst)))
            .collect()
    }

    /// Drops every edge touching `frame`.
    pub fn remove_frame(&mut self, frame: FrameId) {
        self.edges.retain(|(s, d), _| *s != frame && *d != frame);
        self.incoming.remove(&frame);
        for srcs in self.incoming.values_mut() {
            srcs.remove(&frame);
        }
    }
}

impl FromIterator<PoseEdge> for EdgeStore {
    fn from_iter<I: IntoIterator<Item = PoseEdge>>(iter: I) -> Self {
        let mut store = EdgeStore::new();
        for e in iter {
            store.insert(e);
        }
        store
    }
}

/// Formats one edge as `src dst qw qx qy qz tx ty tz cR cT`.
pub fn format_edge(e: &PoseEdge) -> String {
    let [qw, qx, qy, qz] = e.rel_rotation.coords();
    let t = e.rel_translation;
    format!(
        "{} {} {} {} {} {} {} {} {} {} {}",
        e.src, e.dst, qw, qx, qy, qz, t.x, t.y, t.z, e.conf_rot, e.conf_trans
    )
}

pub fn parse_edge(line: &str, line_no: usize) -> Result<PoseEdge> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 11 {
        return Err(Error::parse(
            line_no,
            format!("expected 11 fields, found {}", fields.len()),
        ));
    }
    let id = |s: &str| {
        s.parse::<u64>()
            .map(FrameId)
            .map_err(|e| Error::parse(line_no, format!("bad frame id {s:?}: {e}")))
    };
    let mut v = [0.0f64; 9];
    for (slot, s) in v.iter_mut().zip(&fields[2..]) {
        *slot = s
            .parse()
            .map_err(|e| Error::parse(line_no, format!("bad number {s:?}: {e}")))?;
    }
    let rotation = UnitQuaternion::new(v[0], v[1], v[2], v[3])
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
    PoseEdge::new(
        id(fields[0])?,
        id(fields[1])?,
        Pose::new(rotation, Vec3::new(v[4], v[5], v[6])),
        v[7],
        v[8],
    )
    .map_err(|e| Error::parse(line_no, e.to_string()))
}

pub fn write_edges<'a, W: Write>(
    mut w: W,
    edges: impl IntoIterator<Item = &'a PoseEdge>,
) -> Result<()> {
    for e in edges {
        writeln!(w, "{}", format_edge(e))?;
    }
    Ok(())
}

/// Reads edges, skipping blank lines and `#` comments.
pub fn read_edges<R: BufRead>(r: R) -> Result<Vec<PoseEdge>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_edge(trimmed, i + 1)?);
    }
    Ok(out)
}

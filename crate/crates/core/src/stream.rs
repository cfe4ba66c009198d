//! Causal streaming front-end.
//!
//! Each incoming frame is paired only with the active context: the protected
//! first frame of the segment plus the keyframe bank. The frame is gated on
//! its mean pair confidence, fused from candidates proposed by every context
//! frame, and then possibly admitted into the bank. Admission is driven by
//! token novelty with a staleness cap; eviction removes the entry with the
//! lowest utility `u = d * c` (distinctiveness times best pair confidence).

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::posegraph::{compose_candidate_scaled, fuse_candidates_with, FrameId, FusionConfig, PoseEdge};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

pub const MIN_BRIDGE: usize = 3;
pub const MAX_BRIDGE: usize = 10;

/// Averaged frame descriptor, unit-normalized so cosine similarity is a dot
/// product.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameToken {
    pub id: FrameId,
    features: Vec<f64>,
}

impl FrameToken {
    pub fn new(id: FrameId, mut features: Vec<f64>) -> Result<Self> {
        let n = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::DegenerateInput(format!(
                "token for frame {id} has zero or non-finite norm"
            )));
        }
        features.iter_mut().for_each(|v| *v /= n);
        Ok(Self { id, features })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn cosine(&self, other: &FrameToken) -> f64 {
        self.features
            .iter()
            .zip(&other.features)
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Novelty threshold on max cosine similarity to the bank.
    pub tau: f64,
    /// Force-admit after this many accepted frames without an admission.
    pub delta_max: usize,
    /// Bank capacity, the protected frame included.
    pub m_max: usize,
    /// Length of the calibration prefix, first frame included.
    pub n_cal: usize,
    /// Reject frames scoring below `tau_out` times the calibrated baseline.
    pub tau_out: f64,
    /// Consecutive rejections that trigger a segment reset.
    pub n_rej: usize,
    /// Accepted frames per segment before a scheduled reset.
    pub l_max: usize,
    /// Frames carried across a segment reset.
    pub bridge_len: usize,
    pub fusion: FusionConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tau: 0.98,
            delta_max: 20,
            m_max: 100,
            n_cal: 3,
            tau_out: 0.15,
            n_rej: 3,
            l_max: 2000,
            bridge_len: 5,
            fusion: FusionConfig::default(),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tau.is_finite() && self.tau > -1.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (-1, 1], got {}", self.tau));
        }
        if self.delta_max == 0 {
            return bad("delta_max must be positive".into());
        }
        if self.m_max < MAX_BRIDGE.max(2) {
            return bad(format!("m_max must be at least {MAX_BRIDGE}"));
        }
        if self.n_cal < 2 {
            return bad("n_cal must be at least 2 (the first frame has no score)".into());
        }
        if !(self.tau_out >= 0.0 && self.tau_out.is_finite()) {
            return bad(format!("tau_out must be non-negative, got {}", self.tau_out));
        }
        if self.n_rej == 0 {
            return bad("n_rej must be positive".into());
        }
        if !(MIN_BRIDGE..=MAX_BRIDGE).contains(&self.bridge_len) {
            return bad(format!(
                "bridge_len must lie in [{MIN_BRIDGE}, {MAX_BRIDGE}], got {}",
                self.bridge_len
            ));
        }
        if self.l_max <= self.bridge_len {
            return bad("l_max must exceed bridge_len".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub id: FrameId,
    pub token: FrameToken,
    pub pose: Pose,
    /// Strongest averaged pair confidence to another bank member seen so far.
    pub best_conf: f64,
}

/// Bounded set of keyframes with a cached pairwise cosine matrix.
#[derive(Debug, Clone)]
pub struct KeyframeBank {
    entries: Vec<BankEntry>,
    sims: Vec<Vec<f64>>,
    capacity: usize,
    protected: Option<FrameId>,
}

impl KeyframeBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            sims: Vec::new(),
            capacity,
            protected: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn protected(&self) -> Option<FrameId> {
        self.protected
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<FrameId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn get(&self, id: FrameId) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Adds an entry. The first entry of an empty bank becomes the protected one.
    pub fn insert(&mut self, entry: BankEntry) {
        let row: Vec<f64> = self
            .entries
            .iter()
            .map(|e| e.token.cosine(&entry.token))
            .collect();
        for (r, s) in self.sims.iter_mut().zip(&row) {
            r.push(*s);
        }
        let mut row = row;
        row.push(1.0);
        self.sims.push(row);
        if self.entries.is_empty() {
            self.protected = Some(entry.id);
        }
        self.entries.push(entry);
    }

    pub fn remove(&mut self, id: FrameId) -> Option<BankEntry> {
        let idx = self.entries.iter().position(|e| e.id == id)?;
        self.sims.remove(idx);
        for r in &mut self.sims {
            r.remove(idx);
        }
        if self.protected == Some(id) {
            self.protected = None;
        }
        Some(self.entries.remove(idx))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.sims.clear();
        self.protected = None;
    }

    pub fn max_similarity(&self, token: &FrameToken) -> f64 {
        self.entries
            .iter()
            .map(|e| e.token.cosine(token))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(id, d_j, c_j, u_j)` for every non-protected entry, in bank order.
    pub fn utilities(&self) -> Vec<(FrameId, f64, f64, f64)> {
        (0..self.entries.len())
            .filter(|&i| Some(self.entries[i].id) != self.protected)
            .map(|i| {
                let d = self.sims[i]
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i)
                    .map(|(_, s)| 1.0 - s)
                    .fold(f64::INFINITY, f64::min);
                let d = if d.is_finite() { d } else { 1.0 };
                let c = self.entries[i].best_conf;
                (self.entries[i].id, d, c, d * c)
            })
            .collect()
    }

    /// Records the averaged confidence of an edge between two bank members.
    fn note_pair_conf(&mut self, id: FrameId, conf: f64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.id == id) {
            e.best_conf = e.best_conf.max(conf);
        }
    }
}

/// True when the token is novel with respect to the bank, or the staleness cap
/// has been reached.
pub fn admit_check(
    bank: &KeyframeBank,
    token: &FrameToken,
    tau: f64,
    frames_since_admit: usize,
    delta_max: usize,
) -> bool {
    frames_since_admit >= delta_max || bank.max_similarity(token) < tau
}

/// Evicts the non-protected entry with the lowest utility, ties broken by
/// ascending frame id.
pub fn cull(bank: &mut KeyframeBank) -> Option<FrameId> {
    let victim = bank
        .utilities()
        .into_iter()
        .min_by(|a, b| a.3.total_cmp(&b.3).then(a.0.cmp(&b.0)))?
        .0;
    bank.remove(victim);
    Some(victim)
}

/// Mean averaged-pair confidence of a frame against its context.
pub fn gate_score(edges_into_j: &[PoseEdge]) -> f64 {
    if edges_into_j.is_empty() {
        return f64::NAN;
    }
    edges_into_j.iter().map(PoseEdge::mean_conf).sum::<f64>() / edges_into_j.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Calibrating,
    Accept,
    Reject,
}

/// Confidence gate calibrated on the first `n_cal` frames of a stream.
#[derive(Debug, Clone)]
pub struct OutlierGate {
    n_cal: usize,
    tau_out: f64,
    n_rej: usize,
    seen: usize,
    scores: Vec<f64>,
    baseline: Option<f64>,
    consecutive_rejections: usize,
}

impl OutlierGate {
    pub fn new(n_cal: usize, tau_out: f64, n_rej: usize) -> Self {
        Self {
            n_cal,
            tau_out,
            n_rej,
            seen: 0,
            scores: Vec::with_capacity(n_cal),
            baseline: None,
            consecutive_rejections: 0,
        }
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn threshold(&self) -> Option<f64> {
        self.baseline.map(|b| self.tau_out * b)
    }

    pub fn consecutive_rejections(&self) -> usize {
        self.consecutive_rejections
    }

    /// True once `n_rej` frames in a row were rejected.
    pub fn lost_track(&self) -> bool {
        self.consecutive_rejections >= self.n_rej
    }

    /// Scores one frame. `None` marks a frame without context (the first
    /// frame of a stream), which still counts toward the calibration prefix.
    pub fn observe(&mut self, score: Option<f64>) -> GateDecision {
        if let Some(baseline) = self.baseline {
            let score = score.unwrap_or(f64::NAN);
            return if score < self.tau_out * baseline {
                self.consecutive_rejections += 1;
                GateDecision::Reject
            } else {
                self.consecutive_rejections = 0;
                GateDecision::Accept
            };
        }
        self.seen += 1;
        if let Some(s) = score {
            self.scores.push(s);
        }
        if self.seen >= self.n_cal && !self.scores.is_empty() {
            self.baseline = Some(self.scores.iter().sum::<f64>() / self.scores.len() as f64);
        }
        self.consecutive_rejections = 0;
        GateDecision::Calibrating
    }

    /// Clears rejection state at a segment boundary; the calibrated baseline
    /// is kept.
    pub fn reset_counter(&mut self) {
        self.consecutive_rejections = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetReason {
    LostTrack,
    LengthCap,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    Accepted {
        /// `tx ty tz qx qy qz qw`
        pose: [f64; 7],
    },
    AdmittedToBank,
    Evicted {
        evicted: FrameId,
    },
    Rejected {
        threshold: f64,
    },
    SegmentReset {
        reason: ResetReason,
        segment: usize,
        bridge: Vec<FrameId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub frame: FrameId,
    #[serde(flatten)]
    pub kind: EventKind,
    /// Gate score of the frame, absent for frames without context.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
    pub bank_size: usize,
}

impl StreamEvent {
    pub fn name(&self) -> &'static str {
        match self.kind {
            EventKind::Accepted { .. } => "Accepted",
            EventKind::AdmittedToBank => "AdmittedToBank",
            EventKind::Evicted { .. } => "Evicted",
            EventKind::Rejected { .. } => "Rejected",
            EventKind::SegmentReset { .. } => "SegmentReset",
        }
    }
}

pub(crate) fn pose_to_tum(p: &Pose) -> [f64; 7] {
    let t = p.translation;
    let q = p.rotation;
    [t.x, t.y, t.z, q.x(), q.y(), q.z(), q.w()]
}

/// Destination for stream events.
pub trait EventSink {
    fn emit(&mut self, event: &StreamEvent);
}

impl EventSink for Vec<StreamEvent> {
    fn emit(&mut self, event: &StreamEvent) {
        self.push(event.clone());
    }
}

impl EventSink for std::sync::mpsc::Sender<StreamEvent> {
    fn emit(&mut self, event: &StreamEvent) {
        // A closed receiver only means nobody is listening anymore.
        let _ = self.send(event.clone());
    }
}

pub fn write_event_log<W: Write>(mut w: W, events: &[StreamEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_event_log<R: BufRead>(r: R) -> Result<Vec<StreamEvent>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Ratio of metric to predicted depth summaries, used to anchor a segment's
/// translation scale.
pub fn anchor_scale(predicted_depth_summary: f64, metric_depth_summary: f64) -> Result<f64> {
    if !(predicted_depth_summary > 0.0 && metric_depth_summary > 0.0)
        || !predicted_depth_summary.is_finite()
        || !metric_depth_summary.is_finite()
    {
        return Err(Error::NonPositiveDepth {
            predicted: predicted_depth_summary,
            metric: metric_depth_summary,
        });
    }
    Ok(metric_depth_summary / predicted_depth_summary)
}

#[derive(Debug, Clone)]
struct RecentFrame {
    id: FrameId,
    token: FrameToken,
    pose: Pose,
}

/// Owned state of one streaming run.
#[derive(Debug, Clone)]
pub struct StreamState {
    config: StreamConfig,
    bank: KeyframeBank,
    gate: OutlierGate,
    trajectory: BTreeMap<FrameId, Pose>,
    last_frame: Option<FrameId>,
    frames_since_admit: usize,
    segment: usize,
    segment_len: usize,
    segment_scale: f64,
    recent: VecDeque<RecentFrame>,
    degenerate_fusions: u64,
}

impl StreamState {
    pub fn new(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            bank: KeyframeBank::new(config.m_max),
            gate: OutlierGate::new(config.n_cal, config.tau_out, config.n_rej),
            config,
            trajectory: BTreeMap::new(),
            last_frame: None,
            frames_since_admit: 0,
            segment: 0,
            segment_len: 0,
            segment_scale: 1.0,
            recent: VecDeque::with_capacity(MAX_BRIDGE),
            degenerate_fusions: 0,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn bank(&self) -> &KeyframeBank {
        &self.bank
    }

    pub fn gate(&self) -> &OutlierGate {
        &self.gate
    }

    pub fn trajectory(&self) -> &BTreeMap<FrameId, Pose> {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> BTreeMap<FrameId, Pose> {
        self.trajectory
    }

    pub fn frames_since_admit(&self) -> usize {
        self.frames_since_admit
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn segment_scale(&self) -> f64 {
        self.segment_scale
    }

    pub fn degenerate_fusions(&self) -> u64 {
        self.degenerate_fusions
    }

    /// Working-set size: bank entries, cached bridge candidates and pending
    /// calibration scores. Independent of stream length.
    pub fn resident_entries(&self) -> usize {
        self.bank.len() + self.recent.len() + self.gate.scores.len()
    }

    /// Frames the next incoming frame must be paired with, in ascending order.
    pub fn active_context(&self) -> Vec<FrameId> {
        let mut ids = self.bank.ids();
        ids.sort();
        ids
    }

    /// Sets the translation scale applied to edges of the current segment.
    pub fn set_segment_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "segment scale must be positive, got {scale}"
            )));
        }
        self.segment_scale = scale;
        Ok(())
    }

    /// The last `n` accepted frames with their poses, oldest first.
    pub fn recent_frames(&self, n: usize) -> Vec<(FrameId, Pose)> {
        let skip = self.recent.len().saturating_sub(n);
        self.recent.iter().skip(skip).map(|r| (r.id, r.pose)).collect()
    }

    /// Processes one frame against the current active context.
    ///
    /// `edges` must contain an edge `i -> token.id` for every frame `i` of
    /// [`active_context`](Self::active_context); other edges are ignored.
    pub fn process_frame(
        &mut self,
        token: FrameToken,
        edges: &[PoseEdge],
    ) -> Result<Vec<StreamEvent>> {
        let j = token.id;
        if let Some(prev) = self.last_frame {
            if j <= prev {
                return Err(Error::NonMonotoneFrameId { prev, got: j });
            }
        }

        let context = self.active_context();
        let mut ctx_edges = Vec::with_capacity(context.len());
        for &i in &context {
            let e = edges
                .iter()
                .find(|e| e.src == i && e.dst == j)
                .ok_or(Error::MissingContextEdges { frame: j, missing: i })?;
            ctx_edges.push(*e);
        }
        self.last_frame = Some(j);

        let mut events = Vec::new();
        if context.is_empty() {
            // Stream origin.
            self.gate.observe(None);
            self.accept(token, Pose::identity(), &[], None, &mut events);
            return Ok(events);
        }

        let score = gate_score(&ctx_edges);
        match self.gate.observe(Some(score)) {
            GateDecision::Reject => {
                events.push(StreamEvent {
                    frame: j,
                    kind: EventKind::Rejected {
                        threshold: self.gate.threshold().unwrap_or(0.0),
                    },
                    score: Some(score),
                    bank_size: self.bank.len(),
                });
                if self.gate.lost_track() {
                    self.auto_reset(j, ResetReason::LostTrack, &mut events);
                }
                return Ok(events);
            }
            GateDecision::Accept | GateDecision::Calibrating => {}
        }

        let candidates: Vec<_> = ctx_edges
            .iter()
            .map(|e| {
                let ref_pose = self
                    .bank
                    .get(e.src)
                    .expect("context frames are bank members")
                    .pose;
                compose_candidate_scaled(&ref_pose, e, self.segment_scale)
            })
            .collect();
        let fused = fuse_candidates_with(&candidates, &self.config.fusion)?;
        if fused.degenerate_rotation {
            self.degenerate_fusions += 1;
        }
        self.accept(token, fused.pose, &ctx_edges, Some(score), &mut events);

        self.segment_len += 1;
        if self.segment_len >= self.config.l_max {
            self.auto_reset(j, ResetReason::LengthCap, &mut events);
        }
        Ok(events)
    }

    fn accept(
        &mut self,
        token: FrameToken,
        pose: Pose,
        ctx_edges: &[PoseEdge],
        score: Option<f64>,
        events: &mut Vec<StreamEvent>,
    ) {
        let j = token.id;
        self.trajectory.insert(j, pose);
        events.push(StreamEvent {
            frame: j,
            kind: EventKind::Accepted {
                pose: pose_to_tum(&pose),
            },
            score,
            bank_size: self.bank.len(),
        });

        let admit = self.bank.is_empty()
            || admit_check(
                &self.bank,
                &token,
                self.config.tau,
                self.frames_since_admit,
                self.config.delta_max,
            );
        if admit {
            let best_conf = ctx_edges
                .iter()
                .map(PoseEdge::mean_conf)
                .fold(0.0, f64::max);
            for e in ctx_edges {
                self.bank.note_pair_conf(e.src, e.mean_conf());
            }
            self.bank.insert(BankEntry {
                id: j,
                token: token.clone(),
                pose,
                best_conf,
            });
            self.frames_since_admit = 0;
            events.push(StreamEvent {
                frame: j,
                kind: EventKind::AdmittedToBank,
                score,
                bank_size: self.bank.len(),
            });
            if self.bank.len() > self.config.m_max {
                if let Some(evicted) = cull(&mut self.bank) {
                    events.push(StreamEvent {
                        frame: j,
                        kind: EventKind::Evicted { evicted },
                        score,
                        bank_size: self.bank.len(),
                    });
                }
            }
        } else {
            self.frames_since_admit += 1;
        }

        if self.recent.len() == MAX_BRIDGE {
            self.recent.pop_front();
        }
        self.recent.push_back(RecentFrame { id: j, token, pose });
    }

    fn auto_reset(&mut self, frame: FrameId, reason: ResetReason, events: &mut Vec<StreamEvent>) {
        let bridge = self.recent_frames(self.config.bridge_len);
        if bridge.len() < MIN_BRIDGE {
            // Not enough history to carry over; keep tracking in this segment.
            self.gate.reset_counter();
            return;
        }
        self.segment_reset(&bridge)
            .expect("bridge taken from cached recent frames");
        events.push(StreamEvent {
            frame,
            kind: EventKind::SegmentReset {
                reason,
                segment: self.segment,
                bridge: bridge.iter().map(|(id, _)| *id).collect(),
            },
            score: None,
            bank_size: self.bank.len(),
        });
    }

    /// Starts a new segment seeded by `bridge` frames carrying absolute poses.
    ///
    /// The bank is rebuilt from the bridge (the first bridge frame becomes the
    /// protected origin of the segment), the gate's rejection counter is
    /// cleared and the segment counter advances. Bridge frames must be among
    /// the recently accepted frames or current bank members so their tokens
    /// are known.
    pub fn segment_reset(&mut self, bridge: &[(FrameId, Pose)]) -> Result<()> {
        if bridge.len() < MIN_BRIDGE {
            return Err(Error::BridgeTooShort(bridge.len()));
        }
        if bridge.len() > MAX_BRIDGE {
            return Err(Error::BridgeTooLong(bridge.len()));
        }
        let mut seeded = Vec::with_capacity(bridge.len());
        for &(id, pose) in bridge {
            let token = self
                .recent
                .iter()
                .find(|r| r.id == id)
                .map(|r| r.token.clone())
                .or_else(|| self.bank.get(id).map(|e| e.token.clone()))
                .ok_or(Error::UnknownBridgeFrame(id))?;
            seeded.push(BankEntry {
                id,
                token,
                pose,
                best_conf: 0.0,
            });
        }
        self.bank.clear();
        for e in seeded {
            self.bank.insert(e);
        }
        self.gate.reset_counter();
        self.segment += 1;
        self.segment_len = 0;
        self.frames_since_admit = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{UnitQuaternion, Vec3};

    fn tok(id: u64, f: &[f64]) -> FrameToken {
        FrameToken::new(FrameId(id), f.to_vec()).unwrap()
    }

    fn entry(id: u64, f: &[f64], c: f64) -> BankEntry {
        BankEntry {
            id: FrameId(id),
            token: tok(id, f),
            pose: Pose::identity(),
            best_conf: c,
        }
    }

    fn edge(src: u64, dst: u64, t: Vec3, c: f64) -> PoseEdge {
        PoseEdge::new(FrameId(src), FrameId(dst), Pose::from_translation(t), c, c).unwrap()
    }

    #[test]
    fn token_rejects_zero_vector() {
        assert!(FrameToken::new(FrameId(1), vec![0.0; 4]).is_err());
        let t = tok(1, &[3.0, 4.0]);
        assert!((t.cosine(&t) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn admit_check_cases() {
        let mut bank = KeyframeBank::new(10);
        bank.insert(entry(1, &[1.0, 0.0, 0.0], 1.0));
        bank.insert(entry(2, &[0.0, 1.0, 0.0], 1.0));
        assert!(!admit_check(&bank, &tok(3, &[1.0, 0.0, 0.0]), 0.98, 0, 20));
        assert!(admit_check(&bank, &tok(3, &[0.0, 0.0, 1.0]), 0.98, 0, 20));
        assert!(admit_check(&bank, &tok(3, &[1.0, 0.0, 0.0]), 0.98, 20, 20));
        assert!(!admit_check(&bank, &tok(3, &[1.0, 0.0, 0.0]), 0.98, 19, 20));
    }

    #[test]
    fn cull_prefers_duplicates() {
        let mut bank = KeyframeBank::new(3);
        bank.insert(entry(1, &[0.0, 0.0, 1.0], 1.0));
        bank.insert(entry(2, &[1.0, 0.0, 0.0], 1.0));
        bank.insert(entry(3, &[1.0, 0.0, 0.0], 1.0));
        bank.insert(entry(4, &[0.0, 1.0, 0.0], 1.0));
        let evicted = cull(&mut bank).unwrap();
        assert!(evicted == FrameId(2) || evicted == FrameId(3));
        // Tie on utility resolves to the smaller id.
        assert_eq!(evicted, FrameId(2));
        assert_eq!(bank.len(), 3);
    }

    #[test]
    fn cull_uses_confidence_factor() {
        let mut bank = KeyframeBank::new(2);
        bank.insert(entry(1, &[0.0, 0.0, 1.0], 1.0));
        bank.insert(entry(2, &[1.0, 0.0, 0.0], 0.9));
        bank.insert(entry(3, &[0.0, 1.0, 0.0], 0.1));
        assert_eq!(cull(&mut bank), Some(FrameId(3)));
    }

    #[test]
    fn cull_never_evicts_protected_first_frame() {
        let mut bank = KeyframeBank::new(2);
        // Frame 1 duplicates frame 2 and has zero confidence: lowest utility.
        bank.insert(entry(1, &[1.0, 0.0, 0.0], 0.0));
        bank.insert(entry(2, &[1.0, 0.01, 0.0], 0.5));
        bank.insert(entry(3, &[0.0, 1.0, 0.0], 0.5));
        assert_eq!(bank.protected(), Some(FrameId(1)));
        assert_eq!(cull(&mut bank), Some(FrameId(2)));
        assert!(bank.get(FrameId(1)).is_some());
    }

    #[test]
    fn gate_score_cases() {
        let e = |cr: f64, ct: f64| {
            PoseEdge::new(FrameId(1), FrameId(2), Pose::identity(), cr, ct).unwrap()
        };
        assert_eq!(gate_score(&[e(2.0, 2.0)]), 2.0);
        assert_eq!(gate_score(&[e(1.0, 1.0), e(2.0, 4.0)]), 2.0);
        assert_eq!(gate_score(&[e(3.0, 3.0), e(6.0, 12.0)]), 3.0 * gate_score(&[e(1.0, 1.0), e(2.0, 4.0)]));
    }

    #[test]
    fn gate_calibrates_then_rejects() {
        let mut gate = OutlierGate::new(3, 0.15, 3);
        assert_eq!(gate.observe(None), GateDecision::Calibrating);
        assert_eq!(gate.observe(Some(1.0)), GateDecision::Calibrating);
        assert!(gate.baseline().is_none());
        // Even a terrible score passes during calibration.
        assert_eq!(gate.observe(Some(0.01)), GateDecision::Calibrating);
        assert!((gate.baseline().unwrap() - 0.505).abs() < 1e-15);
        assert_eq!(gate.observe(Some(0.1 * 0.505)), GateDecision::Reject);
        assert_eq!(gate.observe(Some(0.1 * 0.505)), GateDecision::Reject);
        assert_eq!(gate.consecutive_rejections(), 2);
        assert_eq!(gate.observe(Some(0.505)), GateDecision::Accept);
        assert_eq!(gate.consecutive_rejections(), 0);
        for _ in 0..3 {
            gate.observe(Some(0.0));
        }
        assert!(gate.lost_track());
    }

    #[test]
    fn anchor_scale_cases() {
        assert_eq!(anchor_scale(2.0, 2.0).unwrap(), 1.0);
        assert_eq!(anchor_scale(1.0, 3.0).unwrap(), 3.0);
        assert!(matches!(
            anchor_scale(0.0, 1.0),
            Err(Error::NonPositiveDepth { .. })
        ));
        assert!(anchor_scale(1.0, -2.0).is_err());
    }

    fn small_config() -> StreamConfig {
        StreamConfig {
            m_max: 10,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn first_frame_is_origin() {
        let mut s = StreamState::new(small_config()).unwrap();
        let ev = s.process_frame(tok(1, &[1.0, 0.0]), &[]).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].name(), "Accepted");
        assert_eq!(ev[1].kind, EventKind::AdmittedToBank);
        assert_eq!(s.trajectory()[&FrameId(1)], Pose::identity());
        assert_eq!(s.active_context(), vec![FrameId(1)]);
    }

    #[test]
    fn process_frame_errors() {
        let mut s = StreamState::new(small_config()).unwrap();
        s.process_frame(tok(5, &[1.0, 0.0]), &[]).unwrap();
        assert!(matches!(
            s.process_frame(tok(5, &[1.0, 0.0]), &[]),
            Err(Error::NonMonotoneFrameId { .. })
        ));
        assert!(matches!(
            s.process_frame(tok(6, &[1.0, 0.0]), &[]),
            Err(Error::MissingContextEdges { frame: FrameId(6), missing: FrameId(5) })
        ));
        // A failed call leaves the state usable.
        s.process_frame(tok(6, &[1.0, 0.0]), &[edge(5, 6, Vec3::x(), 1.0)])
            .unwrap();
    }

    /// Drives a straight-line stream with orthogonal tokens (always novel).
    fn drive(s: &mut StreamState, ids: std::ops::RangeInclusive<u64>, conf: impl Fn(u64) -> f64) -> Vec<StreamEvent> {
        let mut all = Vec::new();
        for j in ids {
            let mut f = vec![0.0; 64];
            f[(j as usize) % 64] = 1.0;
            let edges: Vec<PoseEdge> = s
                .active_context()
                .into_iter()
                .map(|i| {
                    let gap = (j - i.0) as f64;
                    edge(i.0, j, Vec3::new(gap, 0.0, 0.0), conf(j))
                })
                .collect();
            all.extend(s.process_frame(tok(j, &f), &edges).unwrap());
        }
        all
    }

    #[test]
    fn low_confidence_frame_is_rejected_and_gets_no_pose() {
        let mut s = StreamState::new(small_config()).unwrap();
        let ev = drive(&mut s, 1..=6, |j| if j == 5 { 0.1 } else { 1.0 });
        let rejected: Vec<_> = ev.iter().filter(|e| e.name() == "Rejected").collect();
        assert_eq!(rejected.len(), 1);
        assert_eq!(rejected[0].frame, FrameId(5));
        assert!(!s.trajectory().contains_key(&FrameId(5)));
        assert!(!s.bank().ids().contains(&FrameId(5)));
        let p6 = s.trajectory()[&FrameId(6)];
        assert!((p6.translation - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn consecutive_rejections_trigger_reset() {
        let mut s = StreamState::new(small_config()).unwrap();
        let ev = drive(&mut s, 1..=12, |j| if (7..=9).contains(&j) { 0.05 } else { 1.0 });
        let resets: Vec<_> = ev
            .iter()
            .filter(|e| matches!(e.kind, EventKind::SegmentReset { .. }))
            .collect();
        assert_eq!(resets.len(), 1);
        assert_eq!(resets[0].frame, FrameId(9));
        match &resets[0].kind {
            EventKind::SegmentReset { reason, segment, bridge } => {
                assert_eq!(*reason, ResetReason::LostTrack);
                assert_eq!(*segment, 1);
                assert_eq!(bridge, &vec![FrameId(2), FrameId(3), FrameId(4), FrameId(5), FrameId(6)]);
            }
            _ => unreachable!(),
        }
        assert_eq!(s.segment(), 1);
        // Frames after the reset still land on the line.
        let p12 = s.trajectory()[&FrameId(12)];
        assert!((p12.translation - Vec3::new(11.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn segment_reset_bridge_bounds() {
        let mut s = StreamState::new(small_config()).unwrap();
        drive(&mut s, 1..=12, |_| 1.0);
        let two = s.recent_frames(2);
        assert!(matches!(s.segment_reset(&two), Err(Error::BridgeTooShort(2))));
        let mut many = s.recent_frames(10);
        many.push((FrameId(1), Pose::identity()));
        assert!(matches!(s.segment_reset(&many), Err(Error::BridgeTooLong(11))));
        let unknown = vec![(FrameId(100), Pose::identity()); 3];
        assert!(matches!(
            s.segment_reset(&unknown),
            Err(Error::UnknownBridgeFrame(FrameId(100)))
        ));
    }

    #[test]
    fn bridge_offset_propagates_to_new_segment() {
        let mut a = StreamState::new(small_config()).unwrap();
        drive(&mut a, 1..=8, |_| 1.0);
        let mut b = a.clone();
        let bridge = a.recent_frames(3);
        a.segment_reset(&bridge).unwrap();
        let shifted: Vec<_> = bridge
            .iter()
            .map(|(id, p)| (*id, Pose::from_translation(Vec3::new(5.0, 0.0, 0.0)).compose(p)))
            .collect();
        b.segment_reset(&shifted).unwrap();
        drive(&mut a, 9..=15, |_| 1.0);
        drive(&mut b, 9..=15, |_| 1.0);
        for j in 9..=15 {
            let pa = a.trajectory()[&FrameId(j)];
            let pb = b.trajectory()[&FrameId(j)];
            assert!((pb.translation - pa.translation - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-9);
            assert!(pa.rotation.geodesic_rad(&pb.rotation) < 1e-12);
        }
    }

    #[test]
    fn identity_bridge_keeps_poses() {
        let mut s = StreamState::new(small_config()).unwrap();
        drive(&mut s, 1..=4, |_| 1.0);
        let ids = [FrameId(2), FrameId(3), FrameId(4)];
        let bridge: Vec<_> = ids.iter().map(|&id| (id, Pose::identity())).collect();
        s.segment_reset(&bridge).unwrap();
        assert_eq!(s.active_context(), ids.to_vec());
        assert_eq!(s.bank().protected(), Some(FrameId(2)));
        let ev = drive(&mut s, 5..=5, |_| 1.0);
        assert_eq!(ev[0].name(), "Accepted");
        // Every bridge frame sits at the origin, so the new frame is placed
        // at gap translations averaged over the bridge.
        let p = s.trajectory()[&FrameId(5)];
        assert!((p.translation - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(p.rotation.geodesic_rad(&UnitQuaternion::identity()) < 1e-12);
    }

    #[test]
    fn length_cap_triggers_scheduled_reset() {
        let mut s = StreamState::new(StreamConfig {
            l_max: 8,
            m_max: 10,
            ..StreamConfig::default()
        })
        .unwrap();
        let ev = drive(&mut s, 1..=20, |_| 1.0);
        let reasons: Vec<ResetReason> = ev
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::SegmentReset { reason, .. } => Some(*reason),
                _ => None,
            })
            .collect();
        assert_eq!(reasons, vec![ResetReason::LengthCap, ResetReason::LengthCap]);
        assert_eq!(s.trajectory().len(), 20);
    }

    #[test]
    fn segment_scale_multiplies_new_translations() {
        let mut s = StreamState::new(small_config()).unwrap();
        drive(&mut s, 1..=5, |_| 1.0);
        let bridge = s.recent_frames(3);
        s.segment_reset(&bridge).unwrap();
        s.set_segment_scale(anchor_scale(1.0, 2.0).unwrap()).unwrap();
        drive(&mut s, 6..=6, |_| 1.0);
        // Bridge frames 3,4,5 sit at x = 2,3,4; doubled edges propose 8, 7, 6.
        let p = s.trajectory()[&FrameId(6)];
        assert!((p.translation.x - 7.0).abs() < 1e-12);
        assert!(s.set_segment_scale(0.0).is_err());
    }

    #[test]
    fn bank_stays_bounded_with_novel_tokens() {
        let mut s = StreamState::new(small_config()).unwrap();
        let ev = drive(&mut s, 1..=200, |_| 1.0);
        assert!(s.bank().len() <= 10);
        assert!(s.bank().ids().contains(&FrameId(1)));
        assert!(ev.iter().any(|e| matches!(e.kind, EventKind::Evicted { .. })));
    }

    #[test]
    fn event_log_roundtrip() {
        let mut s = StreamState::new(small_config()).unwrap();
        let ev = drive(&mut s, 1..=12, |j| if (7..=9).contains(&j) { 0.05 } else { 1.0 });
        let mut buf = Vec::new();
        write_event_log(&mut buf, &ev).unwrap();
        let back = read_event_log(buf.as_slice()).unwrap();
        assert_eq!(back, ev);
    }

    #[test]
    fn channel_sink_forwards_events() {
        let (tx, rx) = std::sync::mpsc::channel();
        let mut sink = tx;
        let mut s = StreamState::new(small_config()).unwrap();
        for e in s.process_frame(tok(1, &[1.0]), &[]).unwrap() {
            sink.emit(&e);
        }
        drop(sink);
        assert_eq!(rx.iter().count(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(StreamConfig::default().validate().is_ok());
        for bad in [
            StreamConfig { n_cal: 1, ..StreamConfig::default() },
            StreamConfig { bridge_len: 2, ..StreamConfig::default() },
            StreamConfig { tau_out: -0.1, ..StreamConfig::default() },
            StreamConfig { m_max: 3, ..StreamConfig::default() },
        ] {
            assert!(StreamState::new(bad).is_err());
        }
    }
}

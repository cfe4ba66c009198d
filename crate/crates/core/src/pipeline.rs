//! End-to-end drivers: causal streaming over an edge provider, full-context
//! aggregation and pose-graph refinement.

use crate::error::Result;
use crate::eval::Trajectory;
use crate::geom::Pose;
use crate::oracle::EdgeProvider;
use crate::posegraph::{compose_candidate, fuse_candidates_with, FrameId, FusionConfig, PoseEdge};
use crate::refine::{refine, RefineConfig, RefinementProblem, RefinementResult};
use crate::stream::{
    anchor_scale, EventKind, EventSink, ResetReason, StreamConfig, StreamEvent, StreamState,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub frames: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub resets: usize,
    pub max_bank: usize,
    pub max_resident: usize,
    /// Largest number of consecutive accepted frames without an admission.
    pub max_admit_gap: usize,
    pub degenerate_fusions: u64,
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub trajectory: Trajectory,
    pub events: Vec<StreamEvent>,
    pub stats: StreamStats,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StreamOptions {
    /// Force a segment reset right before this frame is processed.
    pub reset_before: Option<FrameId>,
}

/// Streams `frames` through a fresh [`StreamState`], querying the provider
/// only for edges from the active context.
pub fn run_stream<P: EdgeProvider + ?Sized>(
    provider: &P,
    frames: impl IntoIterator<Item = FrameId>,
    config: &StreamConfig,
    options: StreamOptions,
    sink: &mut dyn EventSink,
) -> Result<StreamRun> {
    let mut state = StreamState::new(*config)?;
    let mut events = Vec::new();
    let mut stats = StreamStats::default();
    let mut segment_start = true;

    for j in frames {
        if options.reset_before == Some(j) {
            let bridge = state.recent_frames(config.bridge_len);
            state.segment_reset(&bridge)?;
            let e = StreamEvent {
                frame: j,
                kind: EventKind::SegmentReset {
                    reason: ResetReason::Manual,
                    segment: state.segment(),
                    bridge: bridge.iter().map(|(id, _)| *id).collect(),
                },
                score: None,
                bank_size: state.bank().len(),
            };
            sink.emit(&e);
            events.push(e);
            stats.resets += 1;
            segment_start = true;
        }
        if segment_start {
            if let Some((pred, metric)) = provider.depth_summaries(j)? {
                state.set_segment_scale(anchor_scale(pred, metric)?)?;
            }
            segment_start = false;
        }

        let token = provider.token(j)?;
        let edges = state
            .active_context()
            .into_iter()
            .map(|i| provider.edge(i, j))
            .collect::<Result<Vec<PoseEdge>>>()?;
        let out = state.process_frame(token, &edges)?;

        stats.frames += 1;
        for e in &out {
            match e.kind {
                EventKind::Accepted { .. } => stats.accepted += 1,
                EventKind::Rejected { .. } => stats.rejected += 1,
                EventKind::SegmentReset { .. } => {
                    stats.resets += 1;
                    segment_start = true;
                }
                _ => {}
            }
            sink.emit(e);
        }
        events.extend(out);
        stats.max_bank = stats.max_bank.max(state.bank().len());
        stats.max_resident = stats.max_resident.max(state.resident_entries());
        stats.max_admit_gap = stats.max_admit_gap.max(state.frames_since_admit());
    }
    stats.degenerate_fusions = state.degenerate_fusions();
    Ok(StreamRun {
        trajectory: state.into_trajectory(),
        events,
        stats,
    })
}

/// Causal full-context initialization: frame `j` fuses candidates from every
/// earlier frame.
pub fn aggregate_causal<P: EdgeProvider + ?Sized>(
    provider: &P,
    frames: &[FrameId],
    fusion: &FusionConfig,
) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    for (k, &j) in frames.iter().enumerate() {
        if k == 0 {
            traj.insert(j, Pose::identity());
            continue;
        }
        let candidates = frames[..k]
            .iter()
            .map(|&i| provider.edge(i, j).map(|e| compose_candidate(&traj[&i], &e)))
            .collect::<Result<Vec<_>>>()?;
        traj.insert(j, fuse_candidates_with(&candidates, fusion)?.pose);
    }
    Ok(traj)
}

/// Every ordered pair `i != j` among `frames`.
pub fn all_pair_edges<P: EdgeProvider + ?Sized>(
    provider: &P,
    frames: &[FrameId],
) -> Result<Vec<PoseEdge>> {
    let mut edges = Vec::with_capacity(frames.len() * frames.len().saturating_sub(1));
    for &i in frames {
        for &j in frames {
            if i != j {
                edges.push(provider.edge(i, j)?);
            }
        }
    }
    Ok(edges)
}

#[derive(Debug, Clone)]
pub struct OfflineRun {
    pub initial: Trajectory,
    pub refinement: Option<RefinementResult>,
}

impl OfflineRun {
    /// Refined trajectory if refinement ran, otherwise the initialization.
    pub fn trajectory(&self) -> &Trajectory {
        self.refinement
            .as_ref()
            .map(|r| &r.poses)
            .unwrap_or(&self.initial)
    }
}

/// Full-context run: causal aggregation over all earlier frames, then
/// optionally refinement over all ordered pairs with the first frame fixed.
pub fn run_offline<P: EdgeProvider + ?Sized>(
    provider: &P,
    frames: &[FrameId],
    fusion: &FusionConfig,
    refine_config: Option<&RefineConfig>,
) -> Result<OfflineRun> {
    let initial = aggregate_causal(provider, frames, fusion)?;
    let refinement = match refine_config {
        Some(cfg) if frames.len() >= 2 => {
            let problem = RefinementProblem::new(
                initial.clone(),
                all_pair_edges(provider, frames)?,
                frames[0],
                cfg,
            )?;
            Some(refine(&problem, cfg)?)
        }
        _ => None,
    };
    Ok(OfflineRun {
        initial,
        refinement,
    })
}

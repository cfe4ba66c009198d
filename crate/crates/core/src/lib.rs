//! Streaming relative-pose-graph engine.
//!
//! Pairwise pose predictions (edges carrying a rotation and a translation
//! confidence) are fused into global camera trajectories, either causally
//! through a bounded keyframe bank with an outlier gate and segment resets,
//! or over the full context followed by confidence-weighted pose-graph
//! refinement. A synthetic oracle stands in for the learned pairwise head.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod oracle;
pub mod pipeline;
pub mod posegraph;
pub mod refine;
pub mod stream;
pub mod tum;

pub use error::{Error, Result};
pub use geom::{Pose, Sim3Alignment, UnitQuaternion, Vec3};
pub use posegraph::{CandidatePose, EdgeStore, FrameId, FusionConfig, PoseEdge, TopK, Weighting};
pub use stream::{StreamConfig, StreamEvent, StreamState};

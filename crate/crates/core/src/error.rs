use crate::posegraph::FrameId;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("cannot fuse an empty candidate set")]
    EmptyCandidates,

    #[error("frame ids must be strictly increasing: got {got} after {prev}")]
    NonMonotoneFrameId { prev: FrameId, got: FrameId },

    #[error("frame {frame}: missing edge from context frame {missing}")]
    MissingContextEdges { frame: FrameId, missing: FrameId },

    #[error("bridge of {0} frames is too short (minimum 3)")]
    BridgeTooShort(usize),

    #[error("bridge of {0} frames is too long (maximum 10)")]
    BridgeTooLong(usize),

    #[error("bridge frame {0} has no cached token in the stream state")]
    UnknownBridgeFrame(FrameId),

    #[error("depth summaries must be positive (predicted {predicted}, metric {metric})")]
    NonPositiveDepth { predicted: f64, metric: f64 },

    #[error("objective is not finite")]
    NonFiniteObjective,

    #[error("invalid refinement problem: {0}")]
    InvalidProblem(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("frame {0} is not part of the scene")]
    UnknownFrame(FrameId),

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("pair set is empty")]
    EmptyPairSet,

    #[error("need at least {need} poses, got {got}")]
    TooFewPoses { need: usize, got: usize },

    #[error("trajectories do not share the same frame ids")]
    MismatchedIds,

    #[error("method {method:?} has no value for scene {scene:?}")]
    MissingScene { method: String, scene: String },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("event log does not match the frame plan: {0}")]
    PlanMismatch(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

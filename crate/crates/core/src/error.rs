use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotARotation(f64),
    #[error("clip has no frames")]
    EmptyClip,
    #[error("clip too short: {frames} frames (minimum {min})")]
    ClipTooShort { frames: usize, min: usize },
    #[error("goal frame {goal} already reached at frame {frame}")]
    GoalFrameReached { goal: usize, frame: usize },
    #[error("vector is not unit length (norm {0})")]
    NotUnitVector(f64),
    #[error("no active control joint and no heading goal")]
    NoActiveJointForPelvisIntention,
    #[error("active joint {0} has no goal")]
    MissingGoal(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no recorded graph: {0}")]
    NoRecordedGraph(String),
    #[error("no future frames after index {0}")]
    NoFutureFrames(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("too few samples: {samples} for {components} components")]
    TooFewSamples { samples: usize, components: usize },
    #[error("covariance of component {0} is not positive definite after regularization")]
    SingularCovariance(usize),
    #[error("unknown style '{0}'")]
    UnknownStyle(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence too short: {len} frames (minimum {min})")]
    TooShort { len: usize, min: usize },
    #[error("protocol needs {needed} initial poses, got {got}")]
    InsufficientInitialPoses { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}

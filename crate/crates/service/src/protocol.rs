//! Wire messages. Every message is one JSON object carrying the schema
//! version `v`, an optional client-chosen `id` echoed in the reply, and a
//! `cmd` (requests) or `type` (replies) tag. See `docs/protocol.md`.

use std::path::PathBuf;

use motionctl::generate::EpisodeSpec;
use motionctl::intention::GoalSpec;
use motionctl::kinematics::{grounded_rest_pose, ControlJoint, KinematicSkeleton, PoseState, POSE_DIM};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const SCHEMA_VERSION: u32 = 1;
/// Largest accepted frame on the length-prefixed transport.
pub const MAX_FRAME_BYTES: usize = 16 << 20;

pub type SessionId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub command: Command,
}

impl Request {
    pub fn new(command: Command) -> Self {
        Self {
            v: SCHEMA_VERSION,
            id: None,
            command,
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.v != SCHEMA_VERSION {
            return Err(ServiceError::UnsupportedVersion(self.v));
        }
        Ok(())
    }
}

/// Where a session's first pose comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPose {
    /// Rest pose standing at the origin.
    #[default]
    Rest,
    /// A full pose vector (pelvis translation, root 6D, joint 6D blocks).
    Pose(Vec<f64>),
    /// A frame of a clip file readable by the server.
    Clip { path: PathBuf, frame: usize },
}

impl InitialPose {
    pub fn resolve(&self, skeleton: &KinematicSkeleton) -> Result<PoseState> {
        Ok(match self {
            Self::Rest => grounded_rest_pose(skeleton)?,
            Self::Pose(v) => {
                if v.len() != POSE_DIM {
                    return Err(ServiceError::BadMessage(format!(
                        "pose has {} values, expected {POSE_DIM}",
                        v.len()
                    )));
                }
                PoseState::from_slice(v)?
            }
            Self::Clip { path, frame } => {
                let clip = motionctl::clip::MotionClip::load(path)?;
                clip.frames.get(*frame).cloned().ok_or_else(|| {
                    ServiceError::BadMessage(format!("clip has {} frames, asked for {frame}", clip.len()))
                })?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Create {
        checkpoint: String,
        #[serde(default)]
        initial: InitialPose,
        config: EpisodeSpec,
    },
    Step {
        session: SessionId,
        n: usize,
    },
    SetGoal {
        session: SessionId,
        goals: GoalSpec,
    },
    SetMask {
        session: SessionId,
        joints: Vec<ControlJoint>,
    },
    SetStyle {
        session: SessionId,
        style: String,
    },
    /// Returns the trace so far; with `path`, also writes the clip file and
    /// a `.csv` diagnostics sidecar on the server.
    ExportTrace {
        session: SessionId,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Destroy {
        session: SessionId,
    },
    Health,
    Skeleton,
    Styles,
}

/// One generated frame as streamed to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOut {
    pub frame: usize,
    pub pose: Vec<f64>,
    /// Meters per control slot, `null` for inactive joints.
    pub dtg: [Option<f64>; 6],
    pub gate: bool,
    pub component: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub reply: Reply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    Created {
        session: SessionId,
        frame: usize,
    },
    Frames {
        session: SessionId,
        frames: Vec<FrameOut>,
    },
    /// A mutation was accepted and takes effect when frame `applies_at` is
    /// generated.
    Ack {
        session: SessionId,
        applies_at: usize,
    },
    Trace {
        session: SessionId,
        frames: Vec<Vec<f64>>,
        diagnostics_csv: String,
        style_swaps: Vec<(usize, String)>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Destroyed {
        session: SessionId,
    },
    Health {
        status: String,
        sessions: usize,
        checkpoints: Vec<String>,
        schema: u32,
    },
    Skeleton {
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<[f64; 3]>,
        control_joints: Vec<(ControlJoint, usize)>,
    },
    Styles {
        labels: Vec<String>,
    },
    Error {
        code: String,
        message: String,
    },
}

impl Response {
    pub fn error(id: Option<u64>, e: &ServiceError) -> Self {
        Self {
            v: SCHEMA_VERSION,
            id,
            reply: Reply::Error {
                code: e.code().to_string(),
                message: e.to_string(),
            },
        }
    }
}

use thiserror::Error;

use crate::protocol::SessionId;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown checkpoint '{0}'")]
    UnknownCheckpoint(String),
    #[error("session {0} not found")]
    SessionNotFound(SessionId),
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed message: {0}")]
    BadMessage(String),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error(transparent)]
    Core(#[from] motionctl::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable machine-readable code sent in error replies.
    pub fn code(&self) -> &'static str {
        use motionctl::Error as E;
        match self {
            Self::UnknownCheckpoint(_) => "unknown_checkpoint",
            Self::SessionNotFound(_) => "session_not_found",
            Self::UnsupportedVersion(_) => "unsupported_version",
            Self::BadMessage(_) => "bad_message",
            Self::FrameTooLarge(_) => "frame_too_large",
            Self::Core(E::UnknownStyle(_)) => "unknown_style",
            Self::Core(E::MissingGoal(_) | E::NoActiveJointForPelvisIntention) => "missing_goal",
            Self::Core(E::Config(_)) => "invalid_config",
            Self::Core(_) => "generation_error",
            Self::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

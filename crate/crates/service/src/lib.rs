//! Interactive frame-stepping server for motionctl.
//!
//! Clients create a session against a loaded checkpoint, pull frames in
//! batches, and steer goals, masks and styles between batches. Every
//! mutation lands on the next frame boundary, so a session driven by a fixed
//! command script reproduces offline generation exactly.

pub mod error;
pub mod protocol;
pub mod session;
pub mod transport;

pub use error::{Result, ServiceError};
pub use protocol::{Command, FrameOut, InitialPose, Reply, Request, Response, SCHEMA_VERSION};
pub use session::Service;

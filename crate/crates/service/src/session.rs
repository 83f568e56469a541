//! Session registry and command dispatch, independent of any transport.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use motionctl::generate::{Episode, Generator};
use motionctl::intention::ControlMask;

use crate::error::{Result, ServiceError};
use crate::protocol::{Command, FrameOut, Reply, Request, Response, SessionId, SCHEMA_VERSION};

struct Session {
    checkpoint: String,
    episode: Episode,
}

/// Loaded checkpoints plus the live sessions driving them. Checkpoints and
/// the style bank are shared read-only; each session sits behind its own
/// lock so that one slow client never blocks another.
pub struct Service {
    checkpoints: BTreeMap<String, Generator>,
    sessions: Mutex<HashMap<SessionId, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl Service {
    /// `checkpoints` maps the names clients refer to onto generators. All
    /// generators should share one skeleton; the first is reported to clients.
    pub fn new(checkpoints: BTreeMap<String, Generator>) -> Self {
        Self {
            checkpoints,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Handle one request; failures become error replies.
    pub fn dispatch(&self, req: Request) -> Response {
        let id = req.id;
        match req.check_version().and_then(|_| self.execute(req.command)) {
            Ok(reply) => Response {
                v: SCHEMA_VERSION,
                id,
                reply,
            },
            Err(e) => Response::error(id, &e),
        }
    }

    /// Decode, dispatch and encode one JSON message.
    pub fn dispatch_json(&self, text: &[u8]) -> Vec<u8> {
        let resp = match serde_json::from_slice::<Request>(text) {
            Ok(req) => self.dispatch(req),
            Err(e) => Response::error(None, &ServiceError::BadMessage(e.to_string())),
        };
        serde_json::to_vec(&resp).expect("responses always serialize")
    }

    pub fn execute(&self, command: Command) -> Result<Reply> {
        match command {
            Command::Create {
                checkpoint,
                initial,
                config,
            } => {
                let generator = self
                    .checkpoints
                    .get(&checkpoint)
                    .ok_or_else(|| ServiceError::UnknownCheckpoint(checkpoint.clone()))?;
                let episode = generator.start(initial.resolve(&generator.skeleton)?, config.to_config()?)?;
                let frame = episode.frame();
                let session = self.next_id.fetch_add(1, Ordering::Relaxed);
                self.sessions.lock().unwrap().insert(
                    session,
                    Arc::new(Mutex::new(Session {
                        checkpoint,
                        episode,
                    })),
                );
                Ok(Reply::Created { session, frame })
            }
            Command::Step { session, n } => {
                let s = self.session(session)?;
                let mut s = s.lock().unwrap();
                let mut frames = Vec::with_capacity(n);
                for _ in 0..n {
                    s.episode.step()?;
                    let trace = s.episode.trace();
                    let d = trace.diagnostics.last().expect("a step records diagnostics");
                    frames.push(FrameOut {
                        frame: d.frame,
                        pose: trace.frames[d.frame].to_vec(),
                        dtg: d.dtg,
                        gate: d.gate,
                        component: d.component,
                    });
                }
                Ok(Reply::Frames { session, frames })
            }
            Command::SetGoal { session, goals } => self.mutate(session, |ep| ep.set_goals(&goals)),
            Command::SetMask { session, joints } => {
                self.mutate(session, |ep| ep.set_mask(ControlMask::from_joints(&joints)))
            }
            Command::SetStyle { session, style } => self.mutate(session, |ep| ep.set_style(&style)),
            Command::ExportTrace { session, path } => {
                let s = self.session(session)?;
                let s = s.lock().unwrap();
                let trace = s.episode.trace();
                let csv = trace.diagnostics_csv();
                if let Some(p) = &path {
                    let skeleton = &self.checkpoints[&s.checkpoint].skeleton;
                    trace.save(p, skeleton.hash())?;
                }
                Ok(Reply::Trace {
                    session,
                    frames: trace.frames.iter().map(|f| f.to_vec()).collect(),
                    diagnostics_csv: csv,
                    style_swaps: trace.style_swaps.clone(),
                    path,
                })
            }
            Command::Destroy { session } => {
                self.sessions
                    .lock()
                    .unwrap()
                    .remove(&session)
                    .ok_or(ServiceError::SessionNotFound(session))?;
                Ok(Reply::Destroyed { session })
            }
            Command::Health => Ok(Reply::Health {
                status: "ok".into(),
                sessions: self.session_count(),
                checkpoints: self.checkpoints.keys().cloned().collect(),
                schema: SCHEMA_VERSION,
            }),
            Command::Skeleton => {
                let g = self.any_generator()?;
                let s = &g.skeleton;
                Ok(Reply::Skeleton {
                    names: s.names().to_vec(),
                    parents: s.parents().to_vec(),
                    offsets: s.offsets().iter().map(|o| [o.x, o.y, o.z]).collect(),
                    control_joints: motionctl::kinematics::ControlJoint::ALL
                        .iter()
                        .map(|j| (*j, s.control_index(*j)))
                        .collect(),
                })
            }
            Command::Styles => {
                let g = self.any_generator()?;
                Ok(Reply::Styles {
                    labels: g.styles.labels().map(str::to_string).collect(),
                })
            }
        }
    }

    fn any_generator(&self) -> Result<&Generator> {
        self.checkpoints
            .values()
            .next()
            .ok_or_else(|| ServiceError::UnknownCheckpoint("(none loaded)".into()))
    }

    fn session(&self, id: SessionId) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or(ServiceError::SessionNotFound(id))
    }

    fn mutate(
        &self,
        session: SessionId,
        f: impl FnOnce(&mut Episode) -> motionctl::Result<()>,
    ) -> Result<Reply> {
        let s = self.session(session)?;
        let mut s = s.lock().unwrap();
        f(&mut s.episode)?;
        Ok(Reply::Ack {
            session,
            applies_at: s.episode.frame() + 1,
        })
    }
}

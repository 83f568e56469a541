//! `MotionClip`, the interchange unit between preprocessing, training,
//! generation and evaluation, and its binary container.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! | offset | size  | field                                   |
//! |--------|-------|-----------------------------------------|
//! | 0      | 8     | magic `MCTLCLIP`                        |
//! | 8      | 4     | u32 format version (= 1)                |
//! | 12     | 4     | f32 frames per second                   |
//! | 16     | 4     | u32 frame count N                       |
//! | 20     | 4     | u32 channels per frame C (= 135)        |
//! | 24     | 8     | u64 skeleton hash (0 = unspecified)     |
//! | 32     | 4     | u32 source tag length L                 |
//! | 36     | L     | UTF-8 source tag                        |
//! | 36+L   | 4     | u32 goal annotation count G             |
//! | …      | 20·G  | u8 control slot, 3 zero bytes, u32 frame, 3 × f32 position |
//! | …      | 4·N·C | f32 channels, frame-major               |

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ControlJoint, PoseState, POSE_DIM};

pub const CLIP_MAGIC: &[u8; 8] = b"MCTLCLIP";
pub const CLIP_VERSION: u32 = 1;
pub const TARGET_FPS: f64 = 30.0;

/// A goal annotation attached to a clip (reach targets and the like).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalAnnotation {
    pub joint: ControlJoint,
    pub frame: usize,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub fps: f64,
    pub frames: Vec<PoseState>,
    pub source: String,
    pub goals: Vec<GoalAnnotation>,
    pub skeleton_hash: u64,
}

impl MotionClip {
    pub fn new(fps: f64, frames: Vec<PoseState>, source: impl Into<String>) -> Self {
        Self {
            fps,
            frames,
            source: source.into(),
            goals: Vec::new(),
            skeleton_hash: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames.len().saturating_sub(1) as f64 / self.fps
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CLIP_MAGIC)?;
        w.write_all(&CLIP_VERSION.to_le_bytes())?;
        w.write_all(&(self.fps as f32).to_le_bytes())?;
        w.write_all(&(self.frames.len() as u32).to_le_bytes())?;
        w.write_all(&(POSE_DIM as u32).to_le_bytes())?;
        w.write_all(&self.skeleton_hash.to_le_bytes())?;
        w.write_all(&(self.source.len() as u32).to_le_bytes())?;
        w.write_all(self.source.as_bytes())?;
        w.write_all(&(self.goals.len() as u32).to_le_bytes())?;
        for g in &self.goals {
            w.write_all(&[g.joint.slot() as u8, 0, 0, 0])?;
            w.write_all(&(g.frame as u32).to_le_bytes())?;
            for v in g.position.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        let mut body = Vec::with_capacity(self.frames.len() * POSE_DIM * 4);
        for f in &self.frames {
            for v in f.to_vec() {
                body.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&body)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |d: &str| Error::format("clip", d);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CLIP_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CLIP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fps = read_f32(r)? as f64;
        let n = read_u32(r)? as usize;
        let c = read_u32(r)? as usize;
        if c != POSE_DIM {
            return Err(bad(&format!("expected {POSE_DIM} channels, found {c}")));
        }
        let mut hash = [0u8; 8];
        r.read_exact(&mut hash).map_err(|_| bad("truncated header"))?;
        let len = read_u32(r)? as usize;
        let mut tag = vec![0u8; len];
        r.read_exact(&mut tag).map_err(|_| bad("truncated source tag"))?;
        let source = String::from_utf8(tag).map_err(|_| bad("source tag is not UTF-8"))?;
        let g = read_u32(r)? as usize;
        let mut goals = Vec::with_capacity(g);
        for _ in 0..g {
            let mut head = [0u8; 4];
            r.read_exact(&mut head).map_err(|_| bad("truncated goal"))?;
            let joint = *ControlJoint::ALL
                .get(head[0] as usize)
                .ok_or_else(|| bad("bad control slot"))?;
            let frame = read_u32(r)? as usize;
            let position = Vector3::new(read_f32(r)? as f64, read_f32(r)? as f64, read_f32(r)? as f64);
            goals.push(GoalAnnotation {
                joint,
                frame,
                position,
            });
        }
        let mut body = vec![0u8; n * c * 4];
        r.read_exact(&mut body).map_err(|_| bad("truncated body"))?;
        let mut frames = Vec::with_capacity(n);
        let mut channels = vec![0.0; c];
        for chunk in body.chunks_exact(c * 4) {
            for (v, b) in channels.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
            }
            frames.push(PoseState::from_slice(&channels)?);
        }
        Ok(Self {
            fps,
            frames,
            source,
            goals,
            skeleton_hash: u64::from_le_bytes(hash),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("clip", "truncated field"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut clip = MotionClip::new(30.0, vec![PoseState::default(); 2], "ab");
        clip.skeleton_hash = 0x0102030405060708;
        let bytes = clip.to_bytes();
        assert_eq!(&bytes[0..8], b"MCTLCLIP");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &30.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &135u32.to_le_bytes());
        assert_eq!(&bytes[24..32], &0x0102030405060708u64.to_le_bytes());
        assert_eq!(&bytes[32..36], &2u32.to_le_bytes());
        assert_eq!(&bytes[36..38], b"ab");
        assert_eq!(bytes.len(), 38 + 4 + 2 * 135 * 4);
    }

    #[test]
    fn round_trip_with_goals() {
        let mut clip = MotionClip::new(30.0, vec![PoseState::default(); 3], "synthetic/reach");
        clip.goals.push(GoalAnnotation {
            joint: ControlJoint::RightWrist,
            frame: 2,
            position: Vector3::new(0.5, -0.25, 1.25),
        });
        let back = MotionClip::read_from(&mut clip.to_bytes().as_slice()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn rejects_garbage() {
        assert!(MotionClip::read_from(&mut &b"NOTACLIP\x01\0\0\0"[..]).is_err());
        let bytes = MotionClip::new(30.0, vec![PoseState::default()], "x").to_bytes();
        assert!(MotionClip::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }
}

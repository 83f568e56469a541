//! Benchmark grids.
//!
//! Cases are enumerated with the initial pose outermost and the trial
//! innermost:
//! - single: initial × angle × height × distance × trial
//! - sequential: initial × direction₁ × direction₂ × direction₃ × trial
//! - multi: target × initial × angle × distance × trial
//!
//! Angles are measured from the initial pose's heading. Each case seed is
//! `derive_seed(params.seed, index)`.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::EpisodeConfig;
use crate::intention::{ControlMask, GoalSpec, JointGoal};
use crate::kinematics::{forward_kinematics, ControlJoint, KinematicSkeleton, PoseState};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Single,
    Sequential,
    Multi,
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "sequential" => Ok(Self::Sequential),
            "multi" => Ok(Self::Multi),
            _ => Err(Error::Config(format!("unknown protocol '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub angles: usize,
    pub height_range: [f64; 2],
    pub heights: usize,
    pub distance_range: [f64; 2],
    pub distances: usize,
    pub initial_poses: usize,
    pub trials: usize,
    /// Frames per episode, or per segment in the sequential protocol.
    pub duration: usize,
    pub segments: usize,
    pub segment_distance: f64,
    pub segment_height: f64,
    pub targets: usize,
    pub seed: u64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            angles: 5,
            height_range: [0.5, 1.8],
            heights: 5,
            distance_range: [0.5, 5.0],
            distances: 5,
            initial_poses: 6,
            trials: 5,
            duration: 240,
            segments: 3,
            segment_distance: 5.0,
            segment_height: 1.0,
            targets: 6,
            seed: 0,
        }
    }
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![range[0]],
        _ => (0..n)
            .map(|k| range[0] + (range[1] - range[0]) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// One benchmark episode.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub index: usize,
    pub kind: ProtocolKind,
    pub initial: usize,
    pub target: Option<usize>,
    /// Direction index per segment (one entry outside the sequential grid).
    pub directions: Vec<usize>,
    pub height: Option<usize>,
    pub distance: Option<usize>,
    pub trial: usize,
    pub seed: u64,
    pub mask: ControlMask,
    /// One goal set per segment.
    pub goals: Vec<GoalSpec>,
    /// Frames per segment.
    pub duration: usize,
}

impl GridCase {
    pub fn episode_config(&self) -> EpisodeConfig {
        let mut cfg = EpisodeConfig::new(self.mask, self.goals[0].clone());
        cfg.duration = self.duration;
        cfg.seed = self.seed;
        cfg
    }
}

fn direction(yaw: f64, angle: f64) -> Vector2<f64> {
    let a = yaw + angle;
    Vector2::new(a.cos(), a.sin())
}

fn need(needed: usize, got: usize) -> Result<()> {
    if got < needed {
        return Err(Error::InsufficientInitialPoses { needed, got });
    }
    Ok(())
}

/// Enumerate the cases of a benchmark grid. `targets` is only read by the
/// multi-joint grid.
pub fn protocol_grid(
    kind: ProtocolKind,
    params: &GridParams,
    initial_poses: &[PoseState],
    targets: &[PoseState],
    skeleton: &KinematicSkeleton,
) -> Result<Vec<GridCase>> {
    need(params.initial_poses, initial_poses.len())?;
    if params.duration < 2 {
        return Err(Error::Config("grid duration must be at least 2".into()));
    }
    let angles: Vec<f64> = (0..params.angles).map(|k| TAU * k as f64 / params.angles as f64).collect();
    let heights = linspace(params.height_range, params.heights);
    let distances = linspace(params.distance_range, params.distances);
    let last = params.duration - 1;
    let wrist = ControlMask::only(ControlJoint::RightWrist);
    let mut out = vec![];
    let mut push = |mut case: GridCase| {
        case.index = out.len();
        case.seed = derive_seed(params.seed, case.index as u64);
        out.push(case);
    };
    let base = |kind, initial, mask, goals, trial| GridCase {
        index: 0,
        kind,
        initial,
        target: None,
        directions: vec![],
        height: None,
        distance: None,
        trial,
        seed: 0,
        mask,
        goals,
        duration: params.duration,
    };

    match kind {
        ProtocolKind::Single => {
            for (p, pose) in initial_poses[..params.initial_poses].iter().enumerate() {
                let (xy, yaw) = (pose.pelvis_translation.xy(), pose.yaw()?);
                for (a, angle) in angles.iter().enumerate() {
                    for (h, height) in heights.iter().enumerate() {
                        for (d, dist) in distances.iter().enumerate() {
                            let g = xy + direction(yaw, *angle) * *dist;
                            let goal = GoalSpec::single(
                                ControlJoint::RightWrist,
                                Vector3::new(g.x, g.y, *height),
                                last,
                            );
                            for trial in 0..params.trials {
                                push(GridCase {
                                    directions: vec![a],
                                    height: Some(h),
                                    distance: Some(d),
                                    ..base(kind, p, wrist, vec![goal.clone()], trial)
                                });
                            }
                        }
                    }
                }
            }
        }
        ProtocolKind::Sequential => {
            let paths = params.angles.pow(params.segments as u32);
            for (p, pose) in initial_poses[..params.initial_poses].iter().enumerate() {
                let (xy, yaw) = (pose.pelvis_translation.xy(), pose.yaw()?);
                for path in 0..paths {
                    // Most significant digit is the first segment.
                    let dirs: Vec<usize> = (0..params.segments)
                        .rev()
                        .map(|s| path / params.angles.pow(s as u32) % params.angles)
                        .collect();
                    let mut at = xy;
                    let goals: Vec<GoalSpec> = dirs
                        .iter()
                        .enumerate()
                        .map(|(s, a)| {
                            at += params.segment_distance * direction(yaw, angles[*a]);
                            // Later segments start one frame earlier (on the seam frame).
                            let frame = if s == 0 { last } else { params.duration };
                            GoalSpec::single(
                                ControlJoint::RightWrist,
                                Vector3::new(at.x, at.y, params.segment_height),
                                frame,
                            )
                        })
                        .collect();
                    for trial in 0..params.trials {
                        push(GridCase {
                            directions: dirs.clone(),
                            ..base(kind, p, wrist, goals.clone(), trial)
                        });
                    }
                }
            }
        }
        ProtocolKind::Multi => {
            if targets.len() < params.targets {
                return Err(Error::Config(format!(
                    "multi-joint grid needs {} target poses, got {}",
                    params.targets,
                    targets.len()
                )));
            }
            for (t, target) in targets[..params.targets].iter().enumerate() {
                for (p, pose) in initial_poses[..params.initial_poses].iter().enumerate() {
                    let (xy, yaw) = (pose.pelvis_translation.xy(), pose.yaw()?);
                    for (a, angle) in angles.iter().enumerate() {
                        for (d, dist) in distances.iter().enumerate() {
                            let dir = direction(yaw, *angle);
                            let goals = placed_target(target, xy + dir * *dist, dir, last, skeleton)?;
                            for trial in 0..params.trials {
                                push(GridCase {
                                    target: Some(t),
                                    directions: vec![a],
                                    distance: Some(d),
                                    ..base(kind, p, ControlMask::ALL, vec![goals.clone()], trial)
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// All six control-joint goals of `target` moved to pelvis `xy`, facing `dir`.
fn placed_target(
    target: &PoseState,
    xy: Vector2<f64>,
    dir: Vector2<f64>,
    frame: usize,
    skeleton: &KinematicSkeleton,
) -> Result<GoalSpec> {
    let turn = dir.y.atan2(dir.x) - target.yaw()?;
    let mut placed = target.yawed(turn)?;
    placed.pelvis_translation.x = xy.x;
    placed.pelvis_translation.y = xy.y;
    let fk = forward_kinematics(&placed, skeleton)?;
    let mut goals = GoalSpec::default();
    for j in ControlJoint::ALL {
        goals.joints.insert(
            j,
            JointGoal {
                position: fk[skeleton.control_index(j)],
                frame,
            },
        );
    }
    Ok(goals)
}

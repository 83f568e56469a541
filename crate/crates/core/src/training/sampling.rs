//! Curriculum schedule, control-mask draws and pseudo-goals.

use rand::seq::index::sample;
use rand::Rng;

use super::TrainConfig;
use crate::clip::MotionClip;
use crate::error::{Error, Result};
use crate::intention::{ControlMask, GoalSpec, JointGoal};
use crate::kinematics::{forward_kinematics, ControlJoint, KinematicSkeleton};

/// Autoregressive rollout length for a 1-based `epoch`.
///
/// One step before `ss_start_epoch`, a floored linear ramp up to
/// `ss_max_ar_steps` at `ss_full_epoch`, and the cap afterwards.
pub fn scheduled_ar_steps(epoch: usize, cfg: &TrainConfig) -> usize {
    let (start, full, max) = (cfg.ss_start_epoch, cfg.ss_full_epoch, cfg.ss_max_ar_steps.max(1));
    if epoch < start {
        return 1;
    }
    if epoch >= full {
        return max;
    }
    let frac = (epoch - start) as f64 / (full - start) as f64;
    ((1.0 + frac * (max - 1) as f64).floor() as usize).min(max)
}

/// Active-joint count uniform over 1..=6, then a uniform subset of that size.
pub fn sample_control_mask(rng: &mut impl Rng) -> ControlMask {
    let k = rng.random_range(1..=ControlJoint::ALL.len());
    let mut mask = ControlMask::NONE;
    for slot in sample(rng, ControlJoint::ALL.len(), k) {
        mask.active[slot] = true;
    }
    mask
}

/// Goals taken from a uniformly drawn future frame of `clip`.
///
/// Every active joint targets its ground-truth position at that frame, and
/// the heading goal is the ground-truth root heading there.
pub fn sample_pseudo_goal(
    clip: &MotionClip,
    skeleton: &KinematicSkeleton,
    i: usize,
    mask: &ControlMask,
    rng: &mut impl Rng,
) -> Result<GoalSpec> {
    let last = clip.frames.len().checked_sub(1).ok_or(Error::EmptyClip)?;
    if i >= last {
        return Err(Error::NoFutureFrames(i));
    }
    let g = rng.random_range(i + 1..=last);
    let frame = &clip.frames[g];
    let positions = forward_kinematics(frame, skeleton)?;
    let mut goals = GoalSpec {
        heading: Some(frame.heading_xy()?),
        ..GoalSpec::default()
    };
    for j in mask.active_joints() {
        goals.joints.insert(
            j,
            JointGoal {
                position: positions[skeleton.control_index(j)],
                frame: g,
            },
        );
    }
    Ok(goals)
}

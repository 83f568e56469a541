//! Pose representation, 6D rotation algebra, delta features, forward
//! kinematics and normalization statistics.

mod fk;
mod norm;
mod pose;
pub mod rot6d;
mod skeleton;

pub use fk::{forward_kinematics, global_pose, GlobalPose};
pub use norm::{ChannelStats, NormStats, STD_FLOOR};
pub use pose::{
    apply_delta, compute_delta, yaw_of, DeltaFeature, PoseState, ZMode, DELTA_DIM,
    NUM_BODY_JOINTS, POSE_DIM,
};
pub use rot6d::{matrix_to_rot6d, rot6d_to_matrix, Rot6, IDENTITY_6D};
pub use skeleton::{ControlJoint, KinematicSkeleton, NUM_JOINTS};

#[cfg(test)]
pub(crate) use pose::tests::random_pose;

use crate::clip::MotionClip;
use crate::error::{Error, Result};

/// Lowest global joint height over every frame of a clip.
pub fn min_joint_height(clip: &MotionClip, skeleton: &KinematicSkeleton) -> Result<f64> {
    let mut lowest = f64::INFINITY;
    for frame in &clip.frames {
        for p in forward_kinematics(frame, skeleton)? {
            lowest = lowest.min(p.z);
        }
    }
    Ok(lowest)
}

/// Rest pose at the origin facing +x with its lowest joint on the ground.
pub fn grounded_rest_pose(skeleton: &KinematicSkeleton) -> Result<PoseState> {
    let mut pose = PoseState::rest(nalgebra::Vector3::zeros());
    let lowest = forward_kinematics(&pose, skeleton)?
        .iter()
        .map(|p| p.z)
        .fold(f64::INFINITY, f64::min);
    pose.pelvis_translation.z = -lowest;
    Ok(pose)
}

/// Shift the pelvis height of every frame by one constant so that the lowest
/// joint over the whole clip sits at z = 0. Goal annotations move with it.
pub fn reground_clip(clip: &MotionClip, skeleton: &KinematicSkeleton) -> Result<MotionClip> {
    if clip.frames.is_empty() {
        return Err(Error::EmptyClip);
    }
    let lowest = min_joint_height(clip, skeleton)?;
    let mut out = clip.clone();
    for f in &mut out.frames {
        f.pelvis_translation.z -= lowest;
    }
    for g in &mut out.goals {
        g.position.z -= lowest;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn clip_of(frames: Vec<PoseState>) -> MotionClip {
        MotionClip::new(30.0, frames, "test")
    }

    #[test]
    fn reground_floating_clip() {
        let s = KinematicSkeleton::default_rig();
        let grounded = reground_clip(&clip_of(vec![PoseState::default(); 3]), &s).unwrap();
        assert!(min_joint_height(&grounded, &s).unwrap().abs() < 1e-12);
        let again = reground_clip(&grounded, &s).unwrap();
        assert_eq!(again, grounded);

        let mut floated = grounded.clone();
        for f in &mut floated.frames {
            f.pelvis_translation.z += 0.3;
        }
        let back = reground_clip(&floated, &s).unwrap();
        for (a, b) in back.frames.iter().zip(&floated.frames) {
            assert!((a.pelvis_translation.z - (b.pelvis_translation.z - 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn reground_mixed_clip() {
        let s = KinematicSkeleton::default_rig();
        let mut frames = Vec::new();
        for k in 0..5 {
            let mut p = PoseState::rest(Vector3::new(k as f64, 0.0, 2.0 - 0.2 * k as f64));
            p.joint_rotations[3] = rot6d::columns_6d(
                nalgebra::Rotation3::from_euler_angles(0.0, 0.3 * k as f64, 0.0).matrix(),
            );
            frames.push(p);
        }
        let out = reground_clip(&clip_of(frames.clone()), &s).unwrap();
        assert!(min_joint_height(&out, &s).unwrap().abs() < 1e-6);
        let shift = frames[0].pelvis_translation.z - out.frames[0].pelvis_translation.z;
        for (a, b) in out.frames.iter().zip(&frames) {
            assert!((b.pelvis_translation.z - a.pelvis_translation.z - shift).abs() < 1e-12);
            assert_eq!(a.joint_rotations, b.joint_rotations);
        }
    }

    #[test]
    fn reground_empty_clip_fails() {
        let s = KinematicSkeleton::default_rig();
        assert!(matches!(
            reground_clip(&clip_of(vec![]), &s),
            Err(Error::EmptyClip)
        ));
    }
}

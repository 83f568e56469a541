use nalgebra::{Matrix3, Vector3};

use super::pose::PoseState;
use super::rot6d::rot6d_to_matrix;
use super::skeleton::{KinematicSkeleton, NUM_JOINTS};
use crate::error::Result;

/// Global joint rotations and positions for one pose.
#[derive(Debug, Clone)]
pub struct GlobalPose {
    pub rotations: Vec<Matrix3<f64>>,
    pub positions: Vec<Vector3<f64>>,
}

pub fn global_pose(pose: &PoseState, skeleton: &KinematicSkeleton) -> Result<GlobalPose> {
    let mut rotations = Vec::with_capacity(NUM_JOINTS);
    let mut positions = Vec::with_capacity(NUM_JOINTS);
    rotations.push(rot6d_to_matrix(&pose.root_orientation)?);
    positions.push(pose.pelvis_translation);
    for j in 1..NUM_JOINTS {
        let p = skeleton.parents()[j].expect("non-root joint has a parent");
        let local = rot6d_to_matrix(&pose.joint_rotations[j - 1])?;
        let pos = positions[p] + rotations[p] * skeleton.offsets()[j];
        rotations.push(rotations[p] * local);
        positions.push(pos);
    }
    Ok(GlobalPose {
        rotations,
        positions,
    })
}

/// Global positions of all 22 joints.
pub fn forward_kinematics(
    pose: &PoseState,
    skeleton: &KinematicSkeleton,
) -> Result<Vec<Vector3<f64>>> {
    Ok(global_pose(pose, skeleton)?.positions)
}

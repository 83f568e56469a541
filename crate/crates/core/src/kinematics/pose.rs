use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::rot6d::{columns_6d, rot6d_to_matrix, yaw_matrix, Rot6, IDENTITY_6D};
use crate::error::{Error, Result};

pub const NUM_BODY_JOINTS: usize = 21;
/// 3 + 6 + 21·6.
pub const POSE_DIM: usize = 3 + 6 + NUM_BODY_JOINTS * 6;
/// 2 + 6 + 21·6.
pub const DELTA_DIM: usize = 2 + 6 + NUM_BODY_JOINTS * 6;

/// One frame of character state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    /// World-frame pelvis position, meters.
    pub pelvis_translation: Vector3<f64>,
    pub root_orientation: Rot6,
    /// Local rotations of joints 1..=21 of the skeleton.
    pub joint_rotations: [Rot6; NUM_BODY_JOINTS],
}

impl Default for PoseState {
    fn default() -> Self {
        Self::rest(Vector3::zeros())
    }
}

impl PoseState {
    /// All rotations identity, pelvis at `pelvis`.
    pub fn rest(pelvis: Vector3<f64>) -> Self {
        Self {
            pelvis_translation: pelvis,
            root_orientation: IDENTITY_6D,
            joint_rotations: [IDENTITY_6D; NUM_BODY_JOINTS],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(POSE_DIM);
        v.extend_from_slice(self.pelvis_translation.as_slice());
        v.extend_from_slice(&self.root_orientation);
        for r in &self.joint_rotations {
            v.extend_from_slice(r);
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "pose needs {POSE_DIM} channels, got {}",
                v.len()
            )));
        }
        let mut joint_rotations = [IDENTITY_6D; NUM_BODY_JOINTS];
        for (j, r) in joint_rotations.iter_mut().enumerate() {
            r.copy_from_slice(&v[9 + 6 * j..15 + 6 * j]);
        }
        Ok(Self {
            pelvis_translation: Vector3::new(v[0], v[1], v[2]),
            root_orientation: v[3..9].try_into().unwrap(),
            joint_rotations,
        })
    }

    pub fn root_matrix(&self) -> Result<Matrix3<f64>> {
        rot6d_to_matrix(&self.root_orientation)
    }

    /// Yaw of the root's forward (+x) axis about the world vertical.
    pub fn yaw(&self) -> Result<f64> {
        Ok(yaw_of(&self.root_matrix()?))
    }

    /// Unit horizontal heading of the root's forward axis.
    pub fn heading_xy(&self) -> Result<Vector2<f64>> {
        let y = self.yaw()?;
        Ok(Vector2::new(y.cos(), y.sin()))
    }

    /// Rotate the whole pose about the world vertical axis through the origin.
    pub fn yawed(&self, angle: f64) -> Result<Self> {
        let y = yaw_matrix(angle);
        let mut out = self.clone();
        out.pelvis_translation = y * self.pelvis_translation;
        out.root_orientation = columns_6d(&(y * self.root_matrix()?));
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Yaw angle of a rotation's forward axis. Falls back to the left axis when
/// the forward axis is vertical.
pub fn yaw_of(root: &Matrix3<f64>) -> f64 {
    let fwd = root.column(0);
    if fwd.x.hypot(fwd.y) > 1e-9 {
        fwd.y.atan2(fwd.x)
    } else {
        let left = root.column(1);
        left.y.atan2(left.x) - std::f64::consts::FRAC_PI_2
    }
}

/// Frame-to-frame change with global yaw removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaFeature {
    /// Pelvis displacement in the previous frame's heading frame (x forward).
    pub delta_translation_xy: Vector2<f64>,
    /// `prev⁻¹ · next` for the root, 6D.
    pub delta_root_orientation: Rot6,
    pub delta_joint_rotations: [Rot6; NUM_BODY_JOINTS],
}

impl DeltaFeature {
    pub fn zero() -> Self {
        Self {
            delta_translation_xy: Vector2::zeros(),
            delta_root_orientation: IDENTITY_6D,
            delta_joint_rotations: [IDENTITY_6D; NUM_BODY_JOINTS],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(DELTA_DIM);
        v.extend_from_slice(self.delta_translation_xy.as_slice());
        v.extend_from_slice(&self.delta_root_orientation);
        for r in &self.delta_joint_rotations {
            v.extend_from_slice(r);
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != DELTA_DIM {
            return Err(Error::ShapeMismatch(format!(
                "delta needs {DELTA_DIM} channels, got {}",
                v.len()
            )));
        }
        let mut delta_joint_rotations = [IDENTITY_6D; NUM_BODY_JOINTS];
        for (j, r) in delta_joint_rotations.iter_mut().enumerate() {
            r.copy_from_slice(&v[8 + 6 * j..14 + 6 * j]);
        }
        Ok(Self {
            delta_translation_xy: Vector2::new(v[0], v[1]),
            delta_root_orientation: v[2..8].try_into().unwrap(),
            delta_joint_rotations,
        })
    }
}

/// How the pelvis height evolves when a delta (which has no vertical
/// component) is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ZMode {
    /// Keep the previous frame's height.
    CarryForward,
    /// Use an externally supplied height (ground truth during training, or
    /// the corrected feature height when feedback is active).
    Set(f64),
}

pub fn compute_delta(prev: &PoseState, next: &PoseState) -> Result<DeltaFeature> {
    let r_prev = prev.root_matrix()?;
    let r_next = next.root_matrix()?;
    let unyaw = yaw_matrix(-yaw_of(&r_prev));
    let d = unyaw * (next.pelvis_translation - prev.pelvis_translation);
    let mut delta_joint_rotations = [IDENTITY_6D; NUM_BODY_JOINTS];
    for (j, out) in delta_joint_rotations.iter_mut().enumerate() {
        let a = rot6d_to_matrix(&prev.joint_rotations[j])?;
        let b = rot6d_to_matrix(&next.joint_rotations[j])?;
        *out = columns_6d(&(a.transpose() * b));
    }
    Ok(DeltaFeature {
        delta_translation_xy: Vector2::new(d.x, d.y),
        delta_root_orientation: columns_6d(&(r_prev.transpose() * r_next)),
        delta_joint_rotations,
    })
}

pub fn apply_delta(pose: &PoseState, delta: &DeltaFeature, z_mode: ZMode) -> Result<PoseState> {
    let r_prev = pose.root_matrix()?;
    let yaw = yaw_matrix(yaw_of(&r_prev));
    let step = yaw * Vector3::new(delta.delta_translation_xy.x, delta.delta_translation_xy.y, 0.0);
    let z = match z_mode {
        ZMode::CarryForward => pose.pelvis_translation.z,
        ZMode::Set(z) => z,
    };
    let mut joint_rotations = [IDENTITY_6D; NUM_BODY_JOINTS];
    for (j, out) in joint_rotations.iter_mut().enumerate() {
        let a = rot6d_to_matrix(&pose.joint_rotations[j])?;
        let d = rot6d_to_matrix(&delta.delta_joint_rotations[j])?;
        *out = columns_6d(&(a * d));
    }
    Ok(PoseState {
        pelvis_translation: Vector3::new(
            pose.pelvis_translation.x + step.x,
            pose.pelvis_translation.y + step.y,
            z,
        ),
        root_orientation: columns_6d(&(r_prev * rot6d_to_matrix(&delta.delta_root_orientation)?)),
        joint_rotations,
    })
}

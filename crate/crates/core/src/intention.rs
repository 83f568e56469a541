//! Goal conditioning: per-joint goal velocities, the pelvis attraction toward
//! the goal centroid, the heading error, and the control mask that selects
//! which joints carry a goal.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, ControlJoint, KinematicSkeleton, PoseState};

/// pelvis (2) + orientation (2) + 6 control joints × 3.
pub const INTENTION_DIM: usize = 2 + 2 + 6 * 3;

const UNIT_TOL: f64 = 1e-6;
const SINGULAR_EPS: f64 = 1e-9;
/// Largest magnitude below 2 whose product with a unit vector stays below 2.
const PELVIS_MAX: f64 = 2.0 * (1.0 - f64::EPSILON);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointGoal {
    /// World position, meters.
    pub position: Vector3<f64>,
    /// Frame index at which the joint should arrive.
    pub frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    #[serde(default)]
    pub joints: BTreeMap<ControlJoint, JointGoal>,
    /// Desired facing direction (unit). When absent the heading goal is the
    /// direction from the pelvis toward the goal centroid.
    #[serde(default)]
    pub heading: Option<Vector2<f64>>,
}

impl GoalSpec {
    pub fn single(joint: ControlJoint, position: Vector3<f64>, frame: usize) -> Self {
        let mut joints = BTreeMap::new();
        joints.insert(joint, JointGoal { position, frame });
        Self {
            joints,
            heading: None,
        }
    }

    pub fn get(&self, joint: ControlJoint) -> Option<&JointGoal> {
        self.joints.get(&joint)
    }

    /// Overwrite the entries present in `patch`; a heading in the patch
    /// replaces the current one.
    pub fn merge(&mut self, patch: &GoalSpec) {
        for (j, g) in &patch.joints {
            self.joints.insert(*j, *g);
        }
        if patch.heading.is_some() {
            self.heading = patch.heading;
        }
    }

    /// Check every active joint has a goal and the heading, if any, is unit.
    pub fn validate(&self, mask: &ControlMask) -> Result<()> {
        for j in mask.active_joints() {
            if !self.joints.contains_key(&j) {
                return Err(Error::MissingGoal(j.name()));
            }
        }
        if let Some(h) = self.heading {
            if (h.norm() - 1.0).abs() > UNIT_TOL {
                return Err(Error::NotUnitVector(h.norm()));
            }
        }
        Ok(())
    }
}

/// Which of the six control joints are goal-driven.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlMask {
    pub active: [bool; 6],
}

impl ControlMask {
    pub const NONE: ControlMask = ControlMask { active: [false; 6] };
    pub const ALL: ControlMask = ControlMask { active: [true; 6] };

    pub fn only(joint: ControlJoint) -> Self {
        let mut active = [false; 6];
        active[joint.slot()] = true;
        Self { active }
    }

    pub fn from_joints(joints: &[ControlJoint]) -> Self {
        let mut active = [false; 6];
        for j in joints {
            active[j.slot()] = true;
        }
        Self { active }
    }

    pub fn is_active(&self, joint: ControlJoint) -> bool {
        self.active[joint.slot()]
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn active_joints(&self) -> impl Iterator<Item = ControlJoint> + '_ {
        ControlJoint::ALL
            .into_iter()
            .filter(|j| self.active[j.slot()])
    }

    /// True when every joint active here is also active in `other`.
    pub fn is_subset_of(&self, other: &ControlMask) -> bool {
        self.active
            .iter()
            .zip(other.active)
            .all(|(a, b)| !*a || b)
    }
}

/// The composite conditioning signal for one frame, in world axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionVector {
    pub pelvis_intention: Vector2<f64>,
    pub orientation_intention: Vector2<f64>,
    /// Meters per frame; zero for inactive joints.
    pub control_intentions: [Vector3<f64>; 6],
    pub mask: ControlMask,
}

impl IntentionVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(INTENTION_DIM);
        v.extend_from_slice(self.pelvis_intention.as_slice());
        v.extend_from_slice(self.orientation_intention.as_slice());
        for c in &self.control_intentions {
            v.extend_from_slice(c.as_slice());
        }
        v
    }
}

/// Goal velocity that would bring the joint to `goal` exactly at `t_goal`.
pub fn control_joint_intention(
    goal: &Vector3<f64>,
    joint_pos: &Vector3<f64>,
    t_goal: usize,
    i: usize,
) -> Result<Vector3<f64>> {
    if t_goal <= i {
        return Err(Error::GoalFrameReached {
            goal: t_goal,
            frame: i,
        });
    }
    Ok((goal - joint_pos) / (t_goal - i) as f64)
}

/// Saturating attraction `2·(1 − e^{−‖d‖})·d/‖d‖` with `d = goal − pelvis`.
pub fn pelvis_intention(goal_avg_xy: &Vector2<f64>, pelvis_xy: &Vector2<f64>) -> Vector2<f64> {
    let d = goal_avg_xy - pelvis_xy;
    let dist = d.norm();
    if dist < SINGULAR_EPS {
        return Vector2::zeros();
    }
    let magnitude = (-2.0 * (-dist).exp_m1()).min(PELVIS_MAX);
    d * (magnitude / dist)
}

pub fn orientation_intention(
    h_goal_xy: &Vector2<f64>,
    h_current_xy: &Vector2<f64>,
) -> Result<Vector2<f64>> {
    for h in [h_goal_xy, h_current_xy] {
        if (h.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitVector(h.norm()));
        }
    }
    Ok(h_goal_xy - h_current_xy)
}

/// Average goal xy over the active joints, if any.
pub fn goal_centroid_xy(goals: &GoalSpec, mask: &ControlMask) -> Result<Option<Vector2<f64>>> {
    let mut sum = Vector2::zeros();
    let mut n = 0usize;
    for j in mask.active_joints() {
        let g = goals.get(j).ok_or(Error::MissingGoal(j.name()))?;
        sum += g.position.xy();
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Build the intention vector for frame `i`. Goal frames that have already
/// passed are clamped to one frame ahead, so the control intention becomes
/// the full remaining offset.
pub fn assemble_intention(
    pose: &PoseState,
    skeleton: &KinematicSkeleton,
    goals: &GoalSpec,
    mask: &ControlMask,
    i: usize,
) -> Result<IntentionVector> {
    let centroid = goal_centroid_xy(goals, mask)?;
    if centroid.is_none() && goals.heading.is_none() {
        return Err(Error::NoActiveJointForPelvisIntention);
    }
    let pelvis_xy = pose.pelvis_translation.xy();
    let current = pose.heading_xy()?;

    let pelvis = centroid.map_or_else(Vector2::zeros, |c| pelvis_intention(&c, &pelvis_xy));
    let heading_goal = match (goals.heading, centroid) {
        (Some(h), _) => h,
        (None, Some(c)) => {
            let d = c - pelvis_xy;
            if d.norm() < SINGULAR_EPS {
                current
            } else {
                d.normalize()
            }
        }
        (None, None) => unreachable!(),
    };
    let orientation = orientation_intention(&heading_goal, &current)?;

    let mut control = [Vector3::zeros(); 6];
    if mask.count() > 0 {
        let positions = forward_kinematics(pose, skeleton)?;
        for j in mask.active_joints() {
            let g = goals.get(j).ok_or(Error::MissingGoal(j.name()))?;
            let p = positions[skeleton.control_index(j)];
            control[j.slot()] = control_joint_intention(&g.position, &p, g.frame.max(i + 1), i)?;
        }
    }
    Ok(IntentionVector {
        pelvis_intention: pelvis,
        orientation_intention: orientation,
        control_intentions: control,
        mask: *mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn control_intention_examples() {
        let v = control_joint_intention(
            &Vector3::new(1.0, 0.0, 1.0),
            &Vector3::new(0.0, 0.0, 1.0),
            15,
            5,
        )
        .unwrap();
        assert!((v - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        let p = Vector3::new(0.3, -0.2, 1.1);
        assert_eq!(control_joint_intention(&p, &p, 9, 3).unwrap(), Vector3::zeros());
        let g = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(control_joint_intention(&g, &p, 8, 7).unwrap(), g - p);
        assert!(matches!(
            control_joint_intention(&g, &p, 7, 7),
            Err(Error::GoalFrameReached { .. })
        ));
    }

    #[test]
    fn pelvis_intention_examples() {
        assert_eq!(
            pelvis_intention(&Vector2::zeros(), &Vector2::zeros()),
            Vector2::zeros()
        );
        let far = pelvis_intention(&Vector2::new(10.0, 0.0), &Vector2::zeros());
        assert!((far.x - 2.0 * (1.0 - (-10.0f64).exp())).abs() < 1e-12);
        assert!((far.x - 1.99991).abs() < 1e-5);
        let ln2 = pelvis_intention(&Vector2::new(0.0, 2f64.ln()), &Vector2::zeros());
        assert!((ln2 - Vector2::new(0.0, 1.0)).norm() < 1e-12);
        let huge = pelvis_intention(&Vector2::new(1e6, 0.0), &Vector2::zeros());
        assert!(huge.norm() < 2.0);
    }

    #[test]
    fn orientation_intention_examples() {
        let x = Vector2::new(1.0, 0.0);
        let y = Vector2::new(0.0, 1.0);
        assert_eq!(orientation_intention(&x, &x).unwrap(), Vector2::zeros());
        assert_eq!(orientation_intention(&y, &x).unwrap(), Vector2::new(-1.0, 1.0));
        assert_eq!(orientation_intention(&x, &-x).unwrap(), Vector2::new(2.0, 0.0));
        assert!(matches!(
            orientation_intention(&(x * 2.0), &x),
            Err(Error::NotUnitVector(_))
        ));
    }

    fn setup() -> (KinematicSkeleton, PoseState) {
        (
            KinematicSkeleton::default_rig(),
            PoseState::rest(Vector3::new(0.0, 0.0, 0.97)),
        )
    }

    #[test]
    fn single_active_joint() {
        let (s, pose) = setup();
        let goals = GoalSpec::single(ControlJoint::RightWrist, Vector3::new(2.0, -1.0, 1.2), 100);
        let mask = ControlMask::only(ControlJoint::RightWrist);
        let iv = assemble_intention(&pose, &s, &goals, &mask, 0).unwrap();
        let nonzero = iv
            .control_intentions
            .iter()
            .filter(|c| c.norm() > 0.0)
            .count();
        assert_eq!(nonzero, 1);
        assert!(iv.control_intentions[ControlJoint::RightWrist.slot()].norm() > 0.0);
        let expected = pelvis_intention(&Vector2::new(2.0, -1.0), &Vector2::zeros());
        assert!((iv.pelvis_intention - expected).norm() < 1e-15);
    }

    #[test]
    fn centroid_of_two_and_of_equal_goals() {
        let mut goals = GoalSpec::default();
        goals.joints.insert(
            ControlJoint::LeftWrist,
            JointGoal {
                position: Vector3::new(0.0, 0.0, 1.0),
                frame: 10,
            },
        );
        goals.joints.insert(
            ControlJoint::Head,
            JointGoal {
                position: Vector3::new(2.0, 0.0, 1.5),
                frame: 10,
            },
        );
        let mask = ControlMask::from_joints(&[ControlJoint::LeftWrist, ControlJoint::Head]);
        assert_eq!(
            goal_centroid_xy(&goals, &mask).unwrap(),
            Some(Vector2::new(1.0, 0.0))
        );

        let g = Vector3::new(0.7, -1.3, 0.4);
        let mut all = GoalSpec::default();
        for j in ControlJoint::ALL {
            all.joints.insert(j, JointGoal { position: g, frame: 30 });
        }
        let c = goal_centroid_xy(&all, &ControlMask::ALL).unwrap().unwrap();
        assert!((c - g.xy()).norm() < 1e-15);
    }

    #[test]
    fn all_inactive_needs_heading() {
        let (s, pose) = setup();
        let err = assemble_intention(&pose, &s, &GoalSpec::default(), &ControlMask::NONE, 0);
        assert!(matches!(err, Err(Error::NoActiveJointForPelvisIntention)));
        let goals = GoalSpec {
            heading: Some(Vector2::new(0.0, 1.0)),
            ..Default::default()
        };
        let iv = assemble_intention(&pose, &s, &goals, &ControlMask::NONE, 0).unwrap();
        assert_eq!(iv.pelvis_intention, Vector2::zeros());
        assert_eq!(iv.orientation_intention, Vector2::new(-1.0, 1.0));
    }

    #[test]
    fn missing_goal_for_active_joint() {
        let (s, pose) = setup();
        let goals = GoalSpec::single(ControlJoint::Head, Vector3::new(1.0, 0.0, 1.6), 10);
        let mask = ControlMask::from_joints(&[ControlJoint::Head, ControlJoint::LeftAnkle]);
        assert!(matches!(
            assemble_intention(&pose, &s, &goals, &mask, 0),
            Err(Error::MissingGoal("left_ankle"))
        ));
    }

    #[test]
    fn expired_goal_clamps_denominator() {
        let (s, pose) = setup();
        let target = Vector3::new(1.0, 1.0, 1.0);
        let goals = GoalSpec::single(ControlJoint::Pelvis, target, 10);
        let mask = ControlMask::only(ControlJoint::Pelvis);
        let iv = assemble_intention(&pose, &s, &goals, &mask, 25).unwrap();
        assert_eq!(
            iv.control_intentions[0],
            target - pose.pelvis_translation
        );
    }

    proptest! {
        #[test]
        fn pelvis_bound_and_monotone(a in 0.0f64..30.0, b in 0.0f64..30.0, angle in -3.2f64..3.2) {
            let dir = Vector2::new(angle.cos(), angle.sin());
            let ia = pelvis_intention(&(dir * a), &Vector2::zeros()).norm();
            let ib = pelvis_intention(&(dir * b), &Vector2::zeros()).norm();
            prop_assert!(ia < 2.0 && ib < 2.0);
            if a < b { prop_assert!(ia <= ib); }
            if a >= SINGULAR_EPS {
                prop_assert!((ia - 2.0 * (1.0 - (-a).exp())).abs() < 1e-12);
            }
        }

        #[test]
        fn inactive_goal_is_ignored(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.0f64..2.0) {
            let (s, pose) = setup();
            let mask = ControlMask::only(ControlJoint::RightWrist);
            let mut goals = GoalSpec::single(ControlJoint::RightWrist, Vector3::new(1.0, 2.0, 1.0), 50);
            let base = assemble_intention(&pose, &s, &goals, &mask, 3).unwrap();
            goals.joints.insert(ControlJoint::LeftAnkle, JointGoal { position: Vector3::new(x, y, z), frame: 20 });
            let after = assemble_intention(&pose, &s, &goals, &mask, 3).unwrap();
            prop_assert_eq!(base, after);
        }

        #[test]
        fn translation_covariance(dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
            let (s, pose) = setup();
            let mask = ControlMask::from_joints(&[ControlJoint::RightWrist, ControlJoint::Head]);
            let mut goals = GoalSpec::single(ControlJoint::RightWrist, Vector3::new(1.0, 2.0, 1.0), 50);
            goals.joints.insert(ControlJoint::Head, JointGoal { position: Vector3::new(-1.0, 0.5, 1.7), frame: 40 });
            let a = assemble_intention(&pose, &s, &goals, &mask, 3).unwrap();
            let shift = Vector3::new(dx, dy, 0.0);
            let mut moved = pose.clone();
            moved.pelvis_translation += shift;
            let mut g2 = goals.clone();
            for g in g2.joints.values_mut() { g.position += shift; }
            let b = assemble_intention(&moved, &s, &g2, &mask, 3).unwrap();
            prop_assert!((a.pelvis_intention - b.pelvis_intention).norm() < 1e-9);
            prop_assert!((a.orientation_intention - b.orientation_intention).norm() < 1e-9);
            for (u, v) in a.control_intentions.iter().zip(&b.control_intentions) {
                prop_assert!((u - v).norm() < 1e-9);
            }
        }
    }
}

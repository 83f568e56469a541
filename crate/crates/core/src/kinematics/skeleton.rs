use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 22;

const DEFAULT_SKELETON: &str = include_str!("../../../../assets/skeleton_default.txt");

/// The six joints that can carry a goal, in token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlJoint {
    Pelvis,
    LeftAnkle,
    RightAnkle,
    Head,
    LeftWrist,
    RightWrist,
}

impl ControlJoint {
    pub const ALL: [ControlJoint; 6] = [
        ControlJoint::Pelvis,
        ControlJoint::LeftAnkle,
        ControlJoint::RightAnkle,
        ControlJoint::Head,
        ControlJoint::LeftWrist,
        ControlJoint::RightWrist,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ControlJoint::Pelvis => "pelvis",
            ControlJoint::LeftAnkle => "left_ankle",
            ControlJoint::RightAnkle => "right_ankle",
            ControlJoint::Head => "head",
            ControlJoint::LeftWrist => "left_wrist",
            ControlJoint::RightWrist => "right_wrist",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|j| j.name() == name)
    }
}

impl fmt::Display for ControlJoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed-offset kinematic tree. Joint 0 is the root and uses the pose's root
/// orientation; joint `j > 0` uses the pose's `joint_rotations[j - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicSkeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
    control: [usize; 6],
}

impl KinematicSkeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        if names.len() != NUM_JOINTS || parents.len() != NUM_JOINTS || offsets.len() != NUM_JOINTS
        {
            return Err(Error::Skeleton(format!(
                "expected {NUM_JOINTS} joints, got {} names / {} parents / {} offsets",
                names.len(),
                parents.len(),
                offsets.len()
            )));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || parents[0].is_some() {
            return Err(Error::Skeleton(
                "exactly one root is required and it must be joint 0".into(),
            ));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::Skeleton(format!(
                        "joint '{}' must reference a parent listed before it",
                        names[j]
                    )))
                }
            }
        }
        if names[0] != "pelvis" {
            return Err(Error::Skeleton("root joint must be 'pelvis'".into()));
        }
        let mut control = [0usize; 6];
        for cj in ControlJoint::ALL {
            control[cj.slot()] = names
                .iter()
                .position(|n| n == cj.name())
                .ok_or_else(|| Error::Skeleton(format!("missing control joint '{cj}'")))?;
        }
        Ok(Self {
            names,
            parents,
            offsets,
            control,
        })
    }

    /// The shipped 22-joint rig.
    pub fn default_rig() -> Self {
        Self::parse(DEFAULT_SKELETON).expect("bundled skeleton is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut parents = Vec::new();
        let mut offsets = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Skeleton(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parent = if fields[1] == "-" {
                None
            } else {
                Some(names.iter().position(|n| n == fields[1]).ok_or_else(|| {
                    Error::Skeleton(format!(
                        "line {}: parent '{}' not defined above",
                        lineno + 1,
                        fields[1]
                    ))
                })?)
            };
            let mut xyz = [0.0; 3];
            for (k, v) in fields[2..].iter().enumerate() {
                xyz[k] = v.parse().map_err(|_| {
                    Error::Skeleton(format!("line {}: bad number '{v}'", lineno + 1))
                })?;
            }
            names.push(fields[0].to_string());
            parents.push(parent);
            offsets.push(Vector3::from(xyz));
        }
        Self::new(names, parents, offsets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# motionctl skeleton v1\n");
        for j in 0..NUM_JOINTS {
            let parent = self.parents[j].map_or("-", |p| self.names[p].as_str());
            let o = &self.offsets[j];
            out.push_str(&format!(
                "{} {} {:?} {:?} {:?}\n",
                self.names[j], parent, o.x, o.y, o.z
            ));
        }
        out
    }

    /// Stable 64-bit fingerprint of the canonical text form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn control_index(&self, joint: ControlJoint) -> usize {
        self.control[joint.slot()]
    }

    pub fn control_indices(&self) -> [usize; 6] {
        self.control
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices of the two ankles (left, right).
    pub fn ankles(&self) -> [usize; 2] {
        [
            self.control_index(ControlJoint::LeftAnkle),
            self.control_index(ControlJoint::RightAnkle),
        ]
    }
}

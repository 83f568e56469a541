//! Reference-guided feedback: pose features, mixture-model references,
//! nearest-component correction, the one-way feedback latch and named
//! style banks.

mod gmm;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm, CovarianceKind, FitLog, GmmConfig, GmmModel, GMM_MAGIC, GMM_VERSION};

use crate::clip::MotionClip;
use crate::error::{Error, Result};
use crate::kinematics::rot6d::{columns_6d, orthonormalize_6d, yaw_matrix};
use crate::kinematics::{yaw_of, PoseState, Rot6, NUM_BODY_JOINTS};

/// Root + 21 joint 6D blocks, then pelvis height.
pub const FEATURE_DIM: usize = 6 * (1 + NUM_BODY_JOINTS) + 1;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_D_GOAL: f64 = 1.0;
pub const INBETWEEN_ALPHA: f64 = 0.05;

/// Rotations and pelvis height of a pose. The root block has its yaw
/// removed so that features do not depend on which way the character faces.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeature(pub Vec<f64>);

impl PoseFeature {
    pub fn extract(pose: &PoseState) -> Result<Self> {
        let root = pose.root_matrix()?;
        let canonical = yaw_matrix(-yaw_of(&root)) * root;
        let mut v = Vec::with_capacity(FEATURE_DIM);
        v.extend_from_slice(&columns_6d(&canonical));
        for r in &pose.joint_rotations {
            v.extend_from_slice(r);
        }
        v.push(pose.pelvis_translation.z);
        Ok(Self(v))
    }

    /// Write rotations and height into `pose`, keeping its yaw and pelvis xy.
    /// Every 6D block is projected back onto the rotation manifold.
    pub fn update(&self, pose: &PoseState) -> Result<PoseState> {
        if self.0.len() != FEATURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "feature needs {FEATURE_DIM} channels, got {}",
                self.0.len()
            )));
        }
        let yaw = yaw_of(&pose.root_matrix()?);
        let root = crate::kinematics::rot6d_to_matrix(&self.block(0))?;
        let mut out = pose.clone();
        out.root_orientation = columns_6d(&(yaw_matrix(yaw) * root));
        for j in 0..NUM_BODY_JOINTS {
            out.joint_rotations[j] = orthonormalize_6d(&self.block(j + 1))?;
        }
        out.pelvis_translation.z = self.0[FEATURE_DIM - 1];
        Ok(out)
    }

    fn block(&self, b: usize) -> Rot6 {
        self.0[6 * b..6 * b + 6].try_into().unwrap()
    }

    pub fn distance(&self, other: &PoseFeature) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Features of every `stride`-th frame of `clips`, evenly thinned to at most
/// `max` samples.
pub fn reference_features(clips: &[MotionClip], stride: usize, max: Option<usize>) -> Result<Vec<Vec<f64>>> {
    if stride == 0 {
        return Err(Error::Config("feature stride must be at least 1".into()));
    }
    let mut out = vec![];
    for clip in clips {
        for f in clip.frames.iter().step_by(stride) {
            out.push(PoseFeature::extract(f)?.0);
        }
    }
    if let Some(m) = max.filter(|m| *m > 0 && out.len() > *m) {
        let n = out.len();
        out = (0..m).map(|k| out[k * n / m].clone()).collect();
    }
    Ok(out)
}

/// `f + α(μ_k* − f)` toward the Mahalanobis-nearest component, with 6D
/// blocks re-orthonormalized. Returns the corrected feature and `k*`.
pub fn correct_feature(f: &PoseFeature, gmm: &GmmModel, alpha: f64) -> Result<(PoseFeature, usize)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if gmm.dim() != FEATURE_DIM || f.0.len() != FEATURE_DIM {
        return Err(Error::ShapeMismatch(format!(
            "feature and mixture must have {FEATURE_DIM} channels"
        )));
    }
    let k = gmm.nearest_component(&f.0);
    let mu = gmm.mean(k);
    let mut v: Vec<f64> = f.0.iter().zip(mu).map(|(x, m)| x + alpha * (m - x)).collect();
    for b in 0..=NUM_BODY_JOINTS {
        let r: Rot6 = v[6 * b..6 * b + 6].try_into().unwrap();
        v[6 * b..6 * b + 6].copy_from_slice(&orthonormalize_6d(&r)?);
    }
    Ok((PoseFeature(v), k))
}

/// Correct a generated pose when `gate` is on; identity otherwise.
pub fn apply_rgf(pose: &PoseState, gmm: &GmmModel, alpha: f64, gate: bool) -> Result<(PoseState, Option<usize>)> {
    if !gate {
        return Ok((pose.clone(), None));
    }
    let f = PoseFeature::extract(pose)?;
    let (c, k) = correct_feature(&f, gmm, alpha)?;
    Ok((c.update(pose)?, Some(k)))
}

/// One-way switch: once the pelvis comes within `d_goal` of the goal
/// centroid, feedback stays off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackLatch {
    pub d_goal: f64,
    active: bool,
}

impl FeedbackLatch {
    pub fn new(d_goal: f64) -> Self {
        Self { d_goal, active: true }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Observe a pelvis position; returns the gate state afterwards.
    pub fn observe(&mut self, pelvis_xy: &Vector2<f64>, goal_avg_xy: Option<&Vector2<f64>>) -> bool {
        if let Some(g) = goal_avg_xy {
            if (pelvis_xy - g).norm() < self.d_goal {
                self.active = false;
            }
        }
        self.active
    }

    pub fn reset(&mut self) {
        self.active = true;
    }
}

#[derive(Debug, Clone)]
pub struct Style {
    pub gmm: Arc<GmmModel>,
    pub alpha: Option<f64>,
}

/// Per-style overrides read from `styles.json` in a bank directory.
#[derive(Debug, Default, Deserialize, Serialize)]
struct StyleMeta {
    alpha: Option<f64>,
}

/// Named reference mixtures. Models are shared, never mutated.
#[derive(Debug, Clone, Default)]
pub struct StyleBank {
    styles: BTreeMap<String, Style>,
}

impl StyleBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: impl Into<String>, gmm: GmmModel, alpha: Option<f64>) {
        self.styles.insert(
            label.into(),
            Style {
                gmm: Arc::new(gmm),
                alpha,
            },
        );
    }

    pub fn get(&self, label: &str) -> Result<&Style> {
        self.styles
            .get(label)
            .ok_or_else(|| Error::UnknownStyle(label.to_string()))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.styles.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    /// Every `<label>.gmm` in `dir`, with optional α overrides from
    /// `styles.json` (`{"label": {"alpha": 0.02}}`).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("styles.json");
        let meta: BTreeMap<String, StyleMeta> = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format("styles.json", e.to_string()))?
        } else {
            BTreeMap::new()
        };
        let mut bank = Self::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "gmm"))
            .collect();
        paths.sort();
        for p in paths {
            let label = p.file_stem().unwrap().to_string_lossy().into_owned();
            let alpha = meta.get(&label).and_then(|m| m.alpha);
            bank.insert(label, GmmModel::load(&p)?, alpha);
        }
        Ok(bank)
    }
}

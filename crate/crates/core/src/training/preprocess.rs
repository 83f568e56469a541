//! Raw clips to training windows: resampling, regrounding, windowing, a
//! seeded clip-level split and normalization statistics.

use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::sample_pseudo_goal;
use crate::clip::{MotionClip, TARGET_FPS};
use crate::cvae::{canonical_pose, heading_intention};
use crate::error::{Error, Result};
use crate::intention::{assemble_intention, ControlMask, INTENTION_DIM};
use crate::kinematics::rot6d::{columns_6d, yaw_matrix};
use crate::kinematics::{
    compute_delta, forward_kinematics, reground_clip, rot6d_to_matrix, ChannelStats,
    KinematicSkeleton, NormStats, PoseState, Rot6, DELTA_DIM, NUM_JOINTS, POSE_DIM,
};

/// Shortest clip accepted by [`preprocess`].
pub const MIN_CLIP_FRAMES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Window length in frames at 30 fps.
    pub window: usize,
    /// Trailing pieces shorter than this are dropped.
    pub min_window: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub std_floor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: 240,
            min_window: 30,
            train_fraction: 0.8,
            val_fraction: 0.1,
            seed: 0,
            std_floor: 1e-3,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < MIN_CLIP_FRAMES || self.min_window < MIN_CLIP_FRAMES {
            return Err(Error::Config(format!(
                "window and min_window must be at least {MIN_CLIP_FRAMES} frames"
            )));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&v) || t + v > 1.0 {
            return Err(Error::Config(format!("bad split fractions {t} / {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<MotionClip>,
    pub val: Vec<MotionClip>,
    pub test: Vec<MotionClip>,
    pub stats: NormStats,
}

fn quat(r: &Rot6) -> Result<UnitQuaternion<f64>> {
    Ok(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        rot6d_to_matrix(r)?,
    )))
}

fn slerp6(a: &Rot6, b: &Rot6, t: f64) -> Result<Rot6> {
    let (qa, qb) = (quat(a)?, quat(b)?);
    // Shortest arc: nalgebra's slerp already picks the closer hemisphere.
    let q = qa.slerp(&qb, t);
    Ok(columns_6d(q.to_rotation_matrix().matrix()))
}

/// Resample to 30 fps: linear pelvis interpolation and quaternion slerp for
/// every rotation. Clips already at 30 fps are returned unchanged.
pub fn resample(clip: &MotionClip) -> Result<MotionClip> {
    let n = clip.frames.len();
    if n < MIN_CLIP_FRAMES {
        return Err(Error::ClipTooShort {
            frames: n,
            min: MIN_CLIP_FRAMES,
        });
    }
    if !(clip.fps.is_finite() && clip.fps > 0.0) {
        return Err(Error::Config(format!("clip fps {} is not positive", clip.fps)));
    }
    if clip.fps == TARGET_FPS {
        return Ok(clip.clone());
    }
    let duration = (n - 1) as f64 / clip.fps;
    let count = (duration * TARGET_FPS + 1e-9).floor() as usize + 1;
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let s = k as f64 * clip.fps / TARGET_FPS;
        let i = (s.floor() as usize).min(n - 1);
        let t = s - i as f64;
        if i + 1 >= n || t < 1e-12 {
            frames.push(clip.frames[i].clone());
            continue;
        }
        let (a, b) = (&clip.frames[i], &clip.frames[i + 1]);
        let mut joint_rotations = a.joint_rotations;
        for (j, out) in joint_rotations.iter_mut().enumerate() {
            *out = slerp6(&a.joint_rotations[j], &b.joint_rotations[j], t)?;
        }
        frames.push(PoseState {
            pelvis_translation: a.pelvis_translation.lerp(&b.pelvis_translation, t),
            root_orientation: slerp6(&a.root_orientation, &b.root_orientation, t)?,
            joint_rotations,
        });
    }
    let mut out = MotionClip::new(TARGET_FPS, frames, clip.source.clone());
    out.skeleton_hash = clip.skeleton_hash;
    for g in &clip.goals {
        let mut g = g.clone();
        g.frame = ((g.frame as f64 * TARGET_FPS / clip.fps).round() as usize).min(count - 1);
        out.goals.push(g);
    }
    Ok(out)
}

/// Consecutive non-overlapping windows of `cfg.window` frames; a trailing
/// piece is kept only when it has at least `cfg.min_window` frames.
pub fn window_clip(clip: &MotionClip, cfg: &PreprocessConfig) -> Vec<MotionClip> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < clip.frames.len() {
        let end = (start + cfg.window).min(clip.frames.len());
        if end - start < cfg.min_window {
            break;
        }
        let mut w = MotionClip::new(clip.fps, clip.frames[start..end].to_vec(), clip.source.clone());
        w.skeleton_hash = clip.skeleton_hash;
        w.goals = clip
            .goals
            .iter()
            .filter(|g| (start..end).contains(&g.frame))
            .map(|g| {
                let mut g = g.clone();
                g.frame -= start;
                g
            })
            .collect();
        out.push(w);
        start = end;
    }
    out
}

/// Heading-frame coordinates of every joint, flattened.
fn heading_joints(pose: &PoseState, skeleton: &KinematicSkeleton) -> Result<Vec<f64>> {
    let unyaw = yaw_matrix(-pose.yaw()?);
    let origin = pose.pelvis_translation.xy().push(0.0);
    let mut v = Vec::with_capacity(NUM_JOINTS * 3);
    for p in forward_kinematics(pose, skeleton)? {
        v.extend_from_slice((unyaw * (p - origin)).as_slice());
    }
    Ok(v)
}

/// Normalization statistics over a set of windows. Intention statistics are
/// gathered with every control joint active and pseudo-goals drawn from a
/// generator seeded by `seed`.
pub fn fit_stats(
    windows: &[MotionClip],
    skeleton: &KinematicSkeleton,
    seed: u64,
    std_floor: f64,
) -> Result<NormStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pose, mut delta, mut intent, mut joints) = (vec![], vec![], vec![], vec![]);
    for w in windows {
        for (i, f) in w.frames.iter().enumerate() {
            pose.push(canonical_pose(f)?.to_vec());
            joints.push(heading_joints(f, skeleton)?);
            if let Some(next) = w.frames.get(i + 1) {
                delta.push(compute_delta(f, next)?.to_vec());
                let goals = sample_pseudo_goal(w, skeleton, i, &ControlMask::ALL, &mut rng)?;
                let iv = assemble_intention(f, skeleton, &goals, &ControlMask::ALL, i)?;
                intent.push(heading_intention(&iv, f.yaw()?));
            }
        }
    }
    let fit = |rows: &[Vec<f64>], dim| ChannelStats::fit(rows.iter().map(Vec::as_slice), dim, std_floor);
    Ok(NormStats {
        pose: fit(&pose, POSE_DIM)?,
        delta: fit(&delta, DELTA_DIM)?,
        intention: fit(&intent, INTENTION_DIM)?,
        joints: fit(&joints, NUM_JOINTS * 3)?,
    })
}

/// Split sizes for `n` clips: rounded train and validation counts, the rest
/// for test.
pub fn split_sizes(n: usize, cfg: &PreprocessConfig) -> (usize, usize, usize) {
    let train = ((n as f64 * cfg.train_fraction).round() as usize).min(n);
    let val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Full pipeline. Clips are assigned to splits before windowing, so windows
/// of one clip never straddle splits. Statistics come from the training
/// windows only.
pub fn preprocess(
    raw: &[MotionClip],
    skeleton: &KinematicSkeleton,
    cfg: &PreprocessConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    let mut prepared = Vec::with_capacity(raw.len());
    for clip in raw {
        let c = reground_clip(&resample(clip)?, skeleton)?;
        prepared.push(c);
    }
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let (n_train, n_val, _) = split_sizes(prepared.len(), cfg);
    let windows = |ids: &[usize]| -> Vec<MotionClip> {
        ids.iter().flat_map(|i| window_clip(&prepared[*i], cfg)).collect()
    };
    let train = windows(&order[..n_train]);
    let val = windows(&order[n_train..n_train + n_val]);
    let test = windows(&order[n_train + n_val..]);
    if train.is_empty() {
        return Err(Error::Config("no training windows after preprocessing".into()));
    }
    let stats = fit_stats(&train, skeleton, cfg.seed, cfg.std_floor)?;
    Ok(Dataset {
        train,
        val,
        test,
        stats,
    })
}

const SPLITS: [&str; 3] = ["train", "val", "test"];
const STATS_FILE: &str = "stats.json";

impl Dataset {
    fn split(&self, name: &str) -> &[MotionClip] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }

    /// `dir/{train,val,test}/clip_NNNNN.mclip` plus `dir/stats.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for name in SPLITS {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (k, clip) in self.split(name).iter().enumerate() {
                clip.save(&sub.join(format!("clip_{k:05}.mclip")))?;
            }
        }
        let path = dir.join(STATS_FILE);
        let json = serde_json::to_string_pretty(&self.stats)
            .map_err(|e| Error::format("stats", e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut splits: Vec<Vec<MotionClip>> = Vec::new();
        for name in SPLITS {
            let sub = dir.join(name);
            let mut files = Vec::new();
            if sub.exists() {
                for entry in std::fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))? {
                    let p = entry.map_err(|e| Error::io(&sub, e))?.path();
                    if p.extension().is_some_and(|e| e == "mclip") {
                        files.push(p);
                    }
                }
            }
            files.sort();
            splits.push(files.iter().map(|p| MotionClip::load(p)).collect::<Result<_>>()?);
        }
        let path = dir.join(STATS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let stats = serde_json::from_str(&text).map_err(|e| Error::format("stats", e.to_string()))?;
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            train,
            val,
            test,
            stats,
        })
    }
}

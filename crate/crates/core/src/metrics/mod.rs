//! Evaluation metrics and the benchmark grids they are reported over.
//!
//! Goal reaching: success rate, distance to goal and foot skating.
//! In-betweening: global position and rotation errors and a spectral
//! similarity score.

mod protocol;
mod report;

use nalgebra::UnitQuaternion;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub use protocol::{protocol_grid, GridCase, GridParams, ProtocolKind};
pub use report::{
    evaluate_case, evaluate_grid, Aggregate, CaseResult, DtgAggregate, EvalReport, SegmentResult,
};

use crate::error::{Error, Result};
use crate::intention::{ControlMask, GoalSpec};
use crate::kinematics::{forward_kinematics, global_pose, KinematicSkeleton, PoseState};

pub const DEFAULT_CONTACT_HEIGHT: f64 = 0.05;
/// Pelvis travel below this is treated as this much when normalizing foot skate.
pub const FS_TRAVEL_FLOOR: f64 = 0.01;
pub const NPSS_MIN_FRAMES: usize = 4;

/// Per control slot: minimum distance (meters) between the joint and its goal
/// over all frames. `None` for inactive slots.
pub fn min_goal_distances(
    frames: &[PoseState],
    skeleton: &KinematicSkeleton,
    goals: &GoalSpec,
    mask: &ControlMask,
) -> Result<[Option<f64>; 6]> {
    let mut out = [None; 6];
    let targets: Vec<_> = mask
        .active_joints()
        .map(|j| {
            goals
                .get(j)
                .map(|g| (j, g.position))
                .ok_or(Error::MissingGoal(j.name()))
        })
        .collect::<Result<_>>()?;
    for f in frames {
        let p = forward_kinematics(f, skeleton)?;
        for (j, g) in &targets {
            let d = (p[skeleton.control_index(*j)] - g).norm();
            let slot = &mut out[j.slot()];
            *slot = Some(slot.map_or(d, |m: f64| m.min(d)));
        }
    }
    Ok(out)
}

/// Distance to goal in centimeters per active control slot.
pub fn distance_to_goal(
    frames: &[PoseState],
    skeleton: &KinematicSkeleton,
    goals: &GoalSpec,
    mask: &ControlMask,
) -> Result<[Option<f64>; 6]> {
    Ok(min_goal_distances(frames, skeleton, goals, mask)?.map(|d| d.map(|m| 100.0 * m)))
}

/// Per active slot, whether the joint ever came within `radius` of its goal.
pub fn success_per_joint(
    frames: &[PoseState],
    skeleton: &KinematicSkeleton,
    goals: &GoalSpec,
    mask: &ControlMask,
    radius: f64,
) -> Result<[Option<bool>; 6]> {
    Ok(min_goal_distances(frames, skeleton, goals, mask)?.map(|d| d.map(|m| m <= radius)))
}

/// Fraction of active joints that succeeded; `None` without active joints.
pub fn success_rate(
    frames: &[PoseState],
    skeleton: &KinematicSkeleton,
    goals: &GoalSpec,
    mask: &ControlMask,
    radius: f64,
) -> Result<Option<f64>> {
    let per = success_per_joint(frames, skeleton, goals, mask, radius)?;
    Ok(mean(per.iter().flatten().map(|s| f64::from(u8::from(*s)))))
}

pub(crate) fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Contact-weighted horizontal ankle sliding as a percentage of pelvis travel.
///
/// A frame contributes for each ankle below `contact_height`, weighted by
/// `2 − 2^{h/contact_height}` at the frame's height.
pub fn foot_skate(frames: &[PoseState], skeleton: &KinematicSkeleton, contact_height: f64) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::TooShort {
            len: frames.len(),
            min: 2,
        });
    }
    let ankles = skeleton.ankles();
    let mut prev = forward_kinematics(&frames[0], skeleton)?;
    let (mut slide, mut travel) = (0.0, 0.0);
    for (f, pose) in frames.iter().enumerate().skip(1) {
        let cur = forward_kinematics(pose, skeleton)?;
        for &a in &ankles {
            let h = cur[a].z;
            if h < contact_height {
                let w = 2.0 - (h / contact_height).exp2();
                slide += w * (cur[a].xy() - prev[a].xy()).norm();
            }
        }
        travel += (pose.pelvis_translation.xy() - frames[f - 1].pelvis_translation.xy()).norm();
        prev = cur;
    }
    Ok(100.0 * slide / travel.max(FS_TRAVEL_FLOOR))
}

/// Mean global joint position error and mean global rotation error
/// (quaternion distance with the double cover folded) over frames and joints.
pub fn l2p_l2q(pred: &[PoseState], gt: &[PoseState], skeleton: &KinematicSkeleton) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyClip);
    }
    let (mut lp, mut lq, mut n) = (0.0, 0.0, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        let ga = global_pose(a, skeleton)?;
        let gb = global_pose(b, skeleton)?;
        for j in 0..ga.positions.len() {
            lp += (ga.positions[j] - gb.positions[j]).norm();
            let qa: [f64; 4] = UnitQuaternion::from_matrix(&ga.rotations[j]).into_inner().coords.into();
            let qb: [f64; 4] = UnitQuaternion::from_matrix(&gb.rotations[j]).into_inner().coords.into();
            lq += quaternion_distance(&qa, &qb);
            n += 1;
        }
    }
    Ok((lp / n as f64, lq / n as f64))
}

/// `min(‖q₁ − q₂‖, ‖q₁ + q₂‖)` for quaternions given as 4-vectors.
pub fn quaternion_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (mut minus, mut plus) = (0.0, 0.0);
    for k in 0..4 {
        minus += (a[k] - b[k]).powi(2);
        plus += (a[k] + b[k]).powi(2);
    }
    minus.sqrt().min(plus.sqrt())
}

/// Normalized power spectrum similarity between two sequences of equal
/// length (frames × channels). For each channel the one-sided power spectra
/// are normalized to unit mass, and the L1 distance between their cumulative
/// sums (earth mover's distance in bin units) is averaged over channels
/// weighted by the ground-truth channel power. Channels with no ground-truth
/// power are skipped.
pub fn npss(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if gt.len() < NPSS_MIN_FRAMES {
        return Err(Error::TooShort {
            len: gt.len(),
            min: NPSS_MIN_FRAMES,
        });
    }
    let channels = gt[0].len();
    if pred.iter().chain(gt).any(|r| r.len() != channels) {
        return Err(Error::ShapeMismatch("NPSS rows must share one channel count".into()));
    }
    let t = gt.len();
    let fft = FftPlanner::new().plan_fft_forward(t);
    let spectrum = |rows: &[Vec<f64>], c: usize| -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = rows.iter().map(|r| Complex::new(r[c], 0.0)).collect();
        fft.process(&mut buf);
        buf[..t / 2 + 1].iter().map(|z| z.norm_sqr()).collect()
    };
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..channels {
        let pg = spectrum(gt, c);
        let pp = spectrum(pred, c);
        let wg: f64 = pg.iter().sum();
        if !(wg > 0.0) {
            continue;
        }
        let wp: f64 = pp.iter().sum();
        let (mut cg, mut cp, mut emd) = (0.0, 0.0, 0.0);
        for k in 0..pg.len() {
            cg += pg[k] / wg;
            cp += if wp > 0.0 { pp[k] / wp } else { 0.0 };
            emd += (cg - cp).abs();
        }
        num += wg * emd;
        den += wg;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// [`npss`] over the flattened pose channels of two motions.
pub fn npss_poses(pred: &[PoseState], gt: &[PoseState]) -> Result<f64> {
    let rows = |f: &[PoseState]| f.iter().map(PoseState::to_vec).collect::<Vec<_>>();
    npss(&rows(pred), &rows(gt))
}

#[cfg(test)]
mod tests;

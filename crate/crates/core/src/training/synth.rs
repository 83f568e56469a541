//! Procedural stand-in for captured motion.
//!
//! Two clip kinds are produced. Wander clips walk along a smoothly varying
//! heading with a speed that rises and falls, including stops. Reach clips
//! turn toward a target, walk up to it, turn to face it and then sweep one
//! wrist onto the target with two-bone IK, crouching and leaning for low
//! targets. The reach target is stored as a goal annotation.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::Rng;

use crate::clip::{GoalAnnotation, MotionClip, TARGET_FPS};
use crate::error::{Error, Result};
use crate::kinematics::rot6d::{columns_6d, yaw_matrix};
use crate::kinematics::{
    global_pose, ControlJoint, KinematicSkeleton, PoseState, IDENTITY_6D, NUM_BODY_JOINTS,
};

/// Share of reach clips in a synthetic dataset.
pub const REACH_FRACTION: f64 = 0.6;

const STRIDE: f64 = 1.3;
const TURN_RATE: f64 = 2.5;

fn rx(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::x_axis(), a).matrix()
}

fn ry(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), a).matrix()
}

fn rz(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), a).matrix()
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Joint indices the generator drives, looked up by name.
struct Rig {
    hip: [usize; 2],
    knee: [usize; 2],
    ankle: [usize; 2],
    foot: [usize; 2],
    spine: [usize; 3],
    neck: usize,
    head: usize,
    collar: [usize; 2],
    shoulder: [usize; 2],
    elbow: [usize; 2],
    wrist: [usize; 2],
}

impl Rig {
    fn new(s: &KinematicSkeleton) -> Result<Self> {
        let f = |n: &str| {
            s.index_of(n)
                .ok_or_else(|| Error::Skeleton(format!("synthetic motion needs joint '{n}'")))
        };
        let pair = |n: &str| -> Result<[usize; 2]> {
            Ok([f(&format!("left_{n}"))?, f(&format!("right_{n}"))?])
        };
        Ok(Self {
            hip: pair("hip")?,
            knee: pair("knee")?,
            ankle: pair("ankle")?,
            foot: pair("foot")?,
            spine: [f("spine1")?, f("spine2")?, f("spine3")?],
            neck: f("neck")?,
            head: f("head")?,
            collar: pair("collar")?,
            shoulder: pair("shoulder")?,
            elbow: pair("elbow")?,
            wrist: pair("wrist")?,
        })
    }
}

/// Continuous posture parameters for one frame.
#[derive(Clone)]
struct Body {
    phase: f64,
    amp: f64,
    crouch: f64,
    time: f64,
    sway: [f64; NUM_BODY_JOINTS],
    arm: [Option<(Matrix3<f64>, Matrix3<f64>)>; 2],
}

impl Body {
    fn new(rng: &mut impl Rng) -> Self {
        let mut sway = [0.0; NUM_BODY_JOINTS];
        for s in sway.iter_mut() {
            *s = rng.random_range(0.0..TAU);
        }
        Self {
            phase: rng.random_range(0.0..TAU),
            amp: 0.0,
            crouch: 0.0,
            time: 0.0,
            sway,
            arm: [None, None],
        }
    }

    fn locals(&self, rig: &Rig) -> [Matrix3<f64>; NUM_BODY_JOINTS] {
        let mut m = [Matrix3::identity(); NUM_BODY_JOINTS];
        let a = self.amp;
        let t = self.time;
        let bend = 1.0 * self.crouch;
        let lean = 0.75 * self.crouch;
        for side in 0..2 {
            let phi = self.phase + PI * side as f64;
            let flex = 0.45 * a * phi.sin() + bend;
            let knee = 0.8 * a * phi.cos().max(0.0).powi(2) + 2.0 * bend;
            let ankle = flex - knee + 0.1 * a * (phi - 0.6).sin();
            m[rig.hip[side] - 1] = ry(-flex) * rz(0.03 * a * phi.sin());
            m[rig.knee[side] - 1] = ry(knee);
            m[rig.ankle[side] - 1] = ry(ankle);
            m[rig.foot[side] - 1] = ry(0.15 * a * (phi + 0.8).sin().max(0.0));

            let sign = if side == 0 { 1.0 } else { -1.0 };
            let swing = -0.4 * a * phi.sin();
            m[rig.collar[side] - 1] = rx(sign * 0.03 * (0.5 * t + self.sway[rig.collar[side] - 1]).sin());
            match self.arm[side] {
                Some((shoulder, elbow)) => {
                    m[rig.shoulder[side] - 1] = shoulder;
                    m[rig.elbow[side] - 1] = elbow;
                }
                None => {
                    m[rig.shoulder[side] - 1] = ry(-swing) * rx(-sign * 1.35);
                    m[rig.elbow[side] - 1] = rz(-sign * 0.3 * (1.0 + 0.4 * a));
                }
            }
            m[rig.wrist[side] - 1] = rz(0.06 * (1.1 * t + self.sway[rig.wrist[side] - 1]).sin());
        }
        let twist = 0.08 * a * self.phase.sin();
        for (k, s) in rig.spine.iter().enumerate() {
            let breathe = 0.015 * (1.3 * t + self.sway[*s - 1] + k as f64).sin();
            m[*s - 1] = ry(lean / 3.0 + breathe) * rz(twist / 3.0);
        }
        m[rig.neck - 1] = ry(-0.5 * lean + 0.03 * (0.6 * t + self.sway[rig.neck - 1]).sin());
        m[rig.head - 1] = rz(0.08 * (0.4 * t + self.sway[rig.head - 1]).sin())
            * ry(0.05 * (0.9 * t).sin());
        // A faint wobble on every joint keeps each channel's variance away
        // from zero without visibly changing the motion.
        for (j, r) in m.iter_mut().enumerate() {
            *r *= rx(0.01 * (0.37 * t + self.sway[j] * 1.7).sin());
        }
        m
    }

    fn root(&self, yaw: f64) -> Matrix3<f64> {
        let a = self.amp;
        yaw_matrix(yaw)
            * ry(0.04 * a + 0.02 * a * (2.0 * self.phase).sin())
            * rx(0.03 * a * self.phase.sin())
    }
}

struct Synth<'s> {
    skel: &'s KinematicSkeleton,
    rig: Rig,
}

impl Synth<'_> {
    /// Pose with the given xy position and heading; pelvis height chosen so
    /// the lowest joint touches the ground.
    fn pose(&self, xy: Vector2<f64>, yaw: f64, body: &Body) -> Result<PoseState> {
        let locals = body.locals(&self.rig);
        let mut joint_rotations = [IDENTITY_6D; NUM_BODY_JOINTS];
        for (out, m) in joint_rotations.iter_mut().zip(&locals) {
            *out = columns_6d(m);
        }
        let mut pose = PoseState {
            pelvis_translation: Vector3::new(xy.x, xy.y, 0.0),
            root_orientation: columns_6d(&body.root(yaw)),
            joint_rotations,
        };
        let g = global_pose(&pose, self.skel)?;
        let lowest = g.positions.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        pose.pelvis_translation.z = -lowest;
        Ok(pose)
    }

    fn arm_lengths(&self, side: usize) -> (f64, f64) {
        let o = self.skel.offsets();
        (o[self.rig.elbow[side]].norm(), o[self.rig.wrist[side]].norm())
    }

    /// Local shoulder and elbow rotations placing the wrist at `target`
    /// (clamped to the reachable shell).
    fn arm_ik(
        &self,
        pose: &PoseState,
        side: usize,
        target: Vector3<f64>,
        yaw: f64,
    ) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
        let g = global_pose(pose, self.skel)?;
        let shoulder = self.rig.shoulder[side];
        let parent = self.skel.parents()[shoulder].expect("shoulder has a parent");
        let offsets = self.skel.offsets();
        let (l1, l2) = self.arm_lengths(side);
        let a1 = offsets[self.rig.elbow[side]] / l1;
        let a2 = offsets[self.rig.wrist[side]] / l2;
        let s = g.positions[shoulder];
        let r_parent = g.rotations[parent];

        let d = target - s;
        let dist = d.norm().clamp((l1 - l2).abs() + 1e-6, (l1 + l2) * (1.0 - 1e-6));
        let dir = if d.norm() > 1e-9 { d / d.norm() } else { -Vector3::z() };
        let cos_a = ((l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist)).clamp(-1.0, 1.0);
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let pole = yaw_matrix(yaw) * Vector3::new(-0.2, sign * 0.5, -1.0);
        let mut n = pole - dir * dir.dot(&pole);
        if n.norm() < 1e-9 {
            n = dir.cross(&Vector3::x()).cross(&dir);
        }
        let n = n.normalize();
        let elbow = s + l1 * (cos_a * dir + (1.0 - cos_a * cos_a).sqrt() * n);
        let wrist = s + dist * dir;

        let r_shoulder = align(&(r_parent * a1), &((elbow - s) / l1)) * r_parent;
        let r_elbow = align(&(r_shoulder * a2), &((wrist - elbow) / l2)) * r_shoulder;
        Ok((r_parent.transpose() * r_shoulder, r_shoulder.transpose() * r_elbow))
    }

    /// Turn in place by `delta` over `n` frames, stepping lightly.
    #[allow(clippy::too_many_arguments)]
    fn turn(
        &self,
        frames: &mut Vec<PoseState>,
        body: &mut Body,
        t: &mut f64,
        xy: Vector2<f64>,
        from: f64,
        delta: f64,
        n: usize,
    ) -> Result<f64> {
        let dt = 1.0 / TARGET_FPS;
        let mut yaw = from;
        for k in 0..n {
            yaw = from + delta * smoothstep((k + 1) as f64 / n as f64);
            body.amp += 0.15 * (0.35 - body.amp);
            body.phase += TAU * 1.4 * dt;
            body.time = *t;
            frames.push(self.pose(xy, yaw, body)?);
            *t += dt;
        }
        Ok(yaw)
    }

    /// Crouch level whose shoulder height is within `reach` of `height`.
    fn crouch_for(&self, height: f64, side: usize, reach: f64) -> Result<f64> {
        let shoulder_z = |c: f64| -> Result<f64> {
            let mut b = Body::quiet();
            b.crouch = c;
            let p = self.pose(Vector2::zeros(), 0.0, &b)?;
            Ok(global_pose(&p, self.skel)?.positions[self.rig.shoulder[side]].z)
        };
        if shoulder_z(0.0)? - height <= reach {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if shoulder_z(mid)? - height <= reach {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

impl Body {
    fn quiet() -> Self {
        Self {
            phase: 0.0,
            amp: 0.0,
            crouch: 0.0,
            time: 0.0,
            sway: [0.0; NUM_BODY_JOINTS],
            arm: [None, None],
        }
    }
}

/// Rotation taking unit vector `from` onto unit vector `to`.
fn align(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    match Rotation3::rotation_between(from, to) {
        Some(r) => *r.matrix(),
        None => {
            let axis = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let perp = Unit::new_normalize(from.cross(&axis));
            *Rotation3::from_axis_angle(&perp, PI).matrix()
        }
    }
}

/// Smooth random signal: a few sinusoids with random phases.
struct Wiggle {
    terms: Vec<(f64, f64, f64)>,
}

impl Wiggle {
    fn new(rng: &mut impl Rng, amp: f64, max_freq: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                (
                    amp * rng.random_range(0.3..1.0),
                    rng.random_range(0.1..max_freq),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, f, p)| a * (TAU * f * t + p).sin()).sum()
    }
}

fn wander_clip(sy: &Synth<'_>, rng: &mut impl Rng, frames: usize) -> Result<MotionClip> {
    let dt = 1.0 / TARGET_FPS;
    let mut body = Body::new(rng);
    let mut xy = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let mut yaw = rng.random_range(-PI..PI);
    let base_speed = rng.random_range(0.5..1.3);
    let speed = Wiggle::new(rng, 0.6, 0.15);
    let turn = Wiggle::new(rng, 0.9, 0.2);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 * dt;
        let v = (base_speed + speed.at(t)).clamp(0.0, 1.6);
        let v = if v < 0.2 { 0.0 } else { v };
        let w = turn.at(t);
        let target_amp = (v / 1.2).max(0.35 * w.abs()).min(1.2);
        body.amp += 0.15 * (target_amp - body.amp);
        body.time = t;
        out.push(sy.pose(xy, yaw, &body)?);
        yaw = wrap_angle(yaw + w * dt);
        xy += Vector2::new(yaw.cos(), yaw.sin()) * v * dt;
        body.phase += if v > 0.0 { TAU * v * dt / STRIDE } else { TAU * 1.4 * dt * (0.35 * w.abs()).min(1.0) };
    }
    Ok(MotionClip::new(TARGET_FPS, out, "synth:wander"))
}

fn reach_clip(sy: &Synth<'_>, rng: &mut impl Rng) -> Result<MotionClip> {
    let dt = 1.0 / TARGET_FPS;
    let mut body = Body::new(rng);
    let start = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let yaw0 = rng.random_range(-PI..PI);
    let bearing = yaw0 + rng.random_range(-PI..PI);
    let distance = rng.random_range(0.5..5.0);
    let height = rng.random_range(0.5..1.8);
    let side = if rng.random_bool(0.75) { 1 } else { 0 };
    let joint = if side == 1 { ControlJoint::RightWrist } else { ControlJoint::LeftWrist };
    let target_xy = start + Vector2::new(bearing.cos(), bearing.sin()) * distance;
    let target = Vector3::new(target_xy.x, target_xy.y, height);

    // Final stance: crouch enough, then stand so the target sits in front of
    // the reaching shoulder at a comfortable fraction of arm length.
    let (l1, l2) = sy.arm_lengths(side);
    let reach = 0.85 * (l1 + l2);
    let crouch = sy.crouch_for(height, side, 0.8 * reach)?;
    let mut stance = Body::quiet();
    stance.crouch = crouch;
    let stance_pose = sy.pose(Vector2::zeros(), 0.0, &stance)?;
    let s_body = global_pose(&stance_pose, sy.skel)?.positions[sy.rig.shoulder[side]];
    let dz = height - s_body.z;
    let forward = (reach * reach - dz * dz).max(0.0025).sqrt();
    let facing = (target_xy - start).y.atan2((target_xy - start).x);
    let rot = nalgebra::Rotation2::new(facing);
    let stop = target_xy - rot * Vector2::new(s_body.x + forward, s_body.y);

    let travel = stop - start;
    let travel_dist = travel.norm();
    let heading = if travel_dist > 0.15 { travel.y.atan2(travel.x) } else { facing };
    let turn1 = wrap_angle(heading - yaw0);
    let turn2 = wrap_angle(facing - heading);
    let n_turn1 = (turn1.abs() / TURN_RATE / dt).ceil() as usize;
    let n_turn2 = (turn2.abs() / TURN_RATE / dt).ceil() as usize;

    // Trapezoidal speed profile along the straight segment.
    let v_max: f64 = rng.random_range(1.0..1.4);
    let accel: f64 = 1.5;
    let ramp = (v_max / accel).min((travel_dist / accel).sqrt());
    let v_peak = accel * ramp;
    let cruise = ((travel_dist - v_peak * ramp) / v_peak).max(0.0);
    let walk_time = 2.0 * ramp + cruise;
    let n_walk = if travel_dist > 1e-9 { (walk_time / dt).ceil() as usize } else { 0 };
    let n_reach = (rng.random_range(1.0..1.3) / dt).round() as usize;
    let n_hold = (rng.random_range(0.5..1.5) / dt).round() as usize;

    let mut frames = Vec::new();
    let mut xy = start;
    let mut yaw = yaw0;
    let mut t = 0.0;
    body.time = t;
    frames.push(sy.pose(xy, yaw, &body)?);
    t += dt;
    yaw = sy.turn(&mut frames, &mut body, &mut t, xy, yaw, turn1, n_turn1)?;
    let dir = if travel_dist > 1e-9 { travel / travel_dist } else { Vector2::zeros() };
    for k in 0..n_walk {
        let tw = ((k + 1) as f64 * dt).min(walk_time);
        let s = if tw < ramp {
            0.5 * accel * tw * tw
        } else if tw < ramp + cruise {
            0.5 * v_peak * ramp + v_peak * (tw - ramp)
        } else {
            let r = walk_time - tw;
            travel_dist - 0.5 * accel * r * r
        };
        let prev = xy;
        xy = start + dir * s.min(travel_dist);
        let v = (xy - prev).norm() / dt;
        body.amp += 0.15 * ((v / 1.2).min(1.2) - body.amp);
        body.phase += TAU * (xy - prev).norm() / STRIDE;
        body.time = t;
        frames.push(sy.pose(xy, yaw, &body)?);
        t += dt;
    }
    xy = stop;
    yaw = sy.turn(&mut frames, &mut body, &mut t, xy, yaw, turn2, n_turn2)?;

    // Reach: blend the crouch in and sweep the wrist onto the target.
    let reach_start = {
        let p = sy.pose(xy, yaw, &body)?;
        global_pose(&p, sy.skel)?.positions[sy.rig.wrist[side]]
    };
    let start_crouch = body.crouch;
    for k in 0..n_reach + n_hold {
        let u = smoothstep((k + 1) as f64 / n_reach as f64);
        body.amp *= 0.85;
        body.phase += TAU * 0.5 * dt * body.amp;
        body.crouch = start_crouch + (crouch - start_crouch) * u;
        body.time = t;
        body.arm[side] = None;
        let pose = sy.pose(xy, yaw, &body)?;
        let wrist_goal = reach_start + (target - reach_start) * u;
        body.arm[side] = Some(sy.arm_ik(&pose, side, wrist_goal, yaw)?);
        frames.push(sy.pose(xy, yaw, &body)?);
        t += dt;
    }
    let goal_frame = frames.len() - 1 - n_hold;
    let mut clip = MotionClip::new(TARGET_FPS, frames, "synth:reach");
    clip.goals.push(GoalAnnotation {
        joint,
        frame: goal_frame,
        position: target,
    });
    Ok(clip)
}

/// `n_clips` procedurally generated clips at 30 fps, deterministic in `rng`.
pub fn synth_dataset(
    n_clips: usize,
    skeleton: &KinematicSkeleton,
    rng: &mut impl Rng,
) -> Result<Vec<MotionClip>> {
    let sy = Synth {
        skel: skeleton,
        rig: Rig::new(skeleton)?,
    };
    let mut clips = Vec::with_capacity(n_clips);
    for _ in 0..n_clips {
        let mut clip = if rng.random_bool(REACH_FRACTION) {
            reach_clip(&sy, rng)?
        } else {
            wander_clip(&sy, rng, 240)?
        };
        clip.skeleton_hash = skeleton.hash();
        clips.push(clip);
    }
    Ok(clips)
}

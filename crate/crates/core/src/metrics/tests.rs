use super::*;
use crate::kinematics::{random_pose, ControlJoint};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::f64::consts::PI;

fn skel() -> KinematicSkeleton {
    KinematicSkeleton::default_rig()
}

/// Rest poses whose pelvis advances `step` meters along +x per frame.
fn glide(n: usize, step: f64, z: f64) -> Vec<PoseState> {
    (0..n)
        .map(|k| PoseState::rest(Vector3::new(step * k as f64, 0.0, z)))
        .collect()
}

fn wrist(pose: &PoseState) -> Vector3<f64> {
    let s = skel();
    forward_kinematics(pose, &s).unwrap()[s.control_index(ControlJoint::RightWrist)]
}

fn wrist_goal(p: Vector3<f64>) -> (GoalSpec, ControlMask) {
    (
        GoalSpec::single(ControlJoint::RightWrist, p, 10),
        ControlMask::only(ControlJoint::RightWrist),
    )
}

#[test]
fn success_examples() {
    let s = skel();
    let frames = glide(100, 0.02, 0.93);
    let (g, m) = wrist_goal(wrist(&frames[0]));
    assert_eq!(success_rate(&frames, &s, &g, &m, 0.1).unwrap(), Some(1.0));
    assert_eq!(distance_to_goal(&frames, &s, &g, &m).unwrap()[5], Some(0.0));

    let far = wrist(&frames[0]) + Vector3::new(0.0, 0.0, 10.0);
    let (g, m) = wrist_goal(far);
    assert_eq!(success_rate(&frames, &s, &g, &m, 0.1).unwrap(), Some(0.0));
    let d = distance_to_goal(&frames, &s, &g, &m).unwrap()[5].unwrap();
    assert!((d - 1000.0).abs() < 1e-9);

    // Moving along x, passing 9 cm below the goal exactly at frame 57.
    let near = wrist(&frames[57]) + Vector3::new(0.0, 0.0, 0.09);
    let (g, m) = wrist_goal(near);
    assert_eq!(success_per_joint(&frames, &s, &g, &m, 0.10).unwrap()[5], Some(true));
    assert_eq!(success_per_joint(&frames, &s, &g, &m, 0.08).unwrap()[5], Some(false));
    let d = distance_to_goal(&frames, &s, &g, &m).unwrap()[5].unwrap();
    assert!((d - 9.0).abs() < 1e-9);
    assert_eq!(success_rate(&frames, &s, &g, &ControlMask::NONE, 0.1).unwrap(), None);
}

#[test]
fn distance_along_a_line() {
    let s = skel();
    let frames = glide(201, 0.01, 0.93);
    let a = wrist(&frames[0]);
    let b = wrist(&frames[200]);
    let goal = a + Vector3::new(1.23, 0.25, 0.0);
    // Point-to-segment distance.
    let ab = b - a;
    let t = ((goal - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    let want = 100.0 * (a + ab * t - goal).norm();
    let (g, m) = wrist_goal(goal);
    let got = distance_to_goal(&frames, &s, &g, &m).unwrap()[5].unwrap();
    assert!((got - want).abs() < 1e-6 && (got - 25.0).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn per_joint_minima_at_different_frames() {
    let s = skel();
    let frames = glide(50, 0.05, 0.93);
    let fk = |k: usize| forward_kinematics(&frames[k], &s).unwrap();
    let mut goals = GoalSpec::default();
    for (j, k) in [(ControlJoint::Head, 10), (ControlJoint::LeftWrist, 40)] {
        goals.joints.insert(
            j,
            crate::intention::JointGoal {
                position: fk(k)[s.control_index(j)],
                frame: 49,
            },
        );
    }
    let m = ControlMask::from_joints(&[ControlJoint::Head, ControlJoint::LeftWrist]);
    let d = distance_to_goal(&frames, &s, &goals, &m).unwrap();
    assert_eq!(d[ControlJoint::Head.slot()], Some(0.0));
    assert_eq!(d[ControlJoint::LeftWrist.slot()], Some(0.0));
}

#[test]
fn foot_skate_examples() {
    let s = skel();
    // Ankles sit 0.91 m below the pelvis in the rest pose.
    let still = vec![PoseState::rest(Vector3::new(0.0, 0.0, 0.91)); 10];
    assert_eq!(foot_skate(&still, &s, DEFAULT_CONTACT_HEIGHT).unwrap(), 0.0);
    let airborne = glide(50, 0.03, 1.2);
    assert_eq!(foot_skate(&airborne, &s, DEFAULT_CONTACT_HEIGHT).unwrap(), 0.0);

    // 1 cm per frame at ground level over 3 m of pelvis travel.
    let sliding = glide(301, 0.01, 0.91);
    let fs = foot_skate(&sliding, &s, DEFAULT_CONTACT_HEIGHT).unwrap();
    let mut slide = 0.0;
    let mut travel = 0.0;
    for k in 1..sliding.len() {
        let a = forward_kinematics(&sliding[k - 1], &s).unwrap();
        let b = forward_kinematics(&sliding[k], &s).unwrap();
        for name in ["left_ankle", "right_ankle"] {
            let j = s.index_of(name).unwrap();
            let h = b[j].z;
            if h < 0.05 {
                let w = 2.0 - 2f64.powf(h / 0.05);
                slide += w * ((b[j].x - a[j].x).powi(2) + (b[j].y - a[j].y).powi(2)).sqrt();
            }
        }
        travel += 0.01;
    }
    assert!((fs - 100.0 * slide / travel).abs() < 1e-9);
    assert!((fs - 200.0).abs() < 1e-6);

    let half = glide(301, 0.01, 0.91 + 0.025);
    let fs = foot_skate(&half, &s, DEFAULT_CONTACT_HEIGHT).unwrap();
    assert!((fs - 200.0 * (2.0 - 2f64.sqrt())).abs() < 1e-6);
    assert!(foot_skate(&still[..1], &s, 0.05).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn metrics_ignore_xy_translation(seed in 0u64..1000, dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
        let s = skel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<PoseState> = (0..8)
            .map(|_| {
                let mut p = random_pose(&mut rng, 0.5);
                p.pelvis_translation.z = 0.9;
                p
            })
            .collect();
        let goal = wrist(&frames[3]) + Vector3::new(0.3, -0.1, 0.05);
        let (g, m) = wrist_goal(goal);
        let shift = Vector3::new(dx, dy, 0.0);
        let moved: Vec<PoseState> = frames
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.pelvis_translation += shift;
                q
            })
            .collect();
        let (gm, _) = wrist_goal(goal + shift);
        let a = distance_to_goal(&frames, &s, &g, &m).unwrap()[5].unwrap();
        let b = distance_to_goal(&moved, &s, &gm, &m).unwrap()[5].unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(
            success_rate(&frames, &s, &g, &m, 0.1).unwrap(),
            success_rate(&moved, &s, &gm, &m, 0.1).unwrap()
        );
        let fa = foot_skate(&frames, &s, 0.05).unwrap();
        let fb = foot_skate(&moved, &s, 0.05).unwrap();
        prop_assert!((fa - fb).abs() < 1e-6 * (1.0 + fa));
    }

    #[test]
    fn success_agrees_with_distance(seed in 0u64..1000, r in 0.01f64..0.5) {
        let s = skel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<PoseState> = (0..5).map(|_| random_pose(&mut rng, 0.3)).collect();
        let (g, m) = wrist_goal(wrist(&frames[0]) + Vector3::new(0.1, 0.1, 0.1));
        let d = min_goal_distances(&frames, &s, &g, &m).unwrap()[5].unwrap();
        let ok = success_per_joint(&frames, &s, &g, &m, r).unwrap()[5].unwrap();
        prop_assert_eq!(ok, d <= r);
    }
}

#[test]
fn l2p_l2q_examples() {
    let s = skel();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt: Vec<PoseState> = (0..6).map(|_| random_pose(&mut rng, 0.7)).collect();
    assert_eq!(l2p_l2q(&gt, &gt, &s).unwrap(), (0.0, 0.0));
    let moved: Vec<PoseState> = gt
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.pelvis_translation += Vector3::new(0.6, 0.0, 0.8);
            q
        })
        .collect();
    let (p, q) = l2p_l2q(&moved, &gt, &s).unwrap();
    assert!((p - 1.0).abs() < 1e-12 && q < 1e-12);
    assert!(matches!(l2p_l2q(&gt[..3], &gt, &s), Err(Error::LengthMismatch(3, 6))));

    let a = [0.5, -0.5, 0.5, 0.5];
    let neg = a.map(|v| -v);
    assert_eq!(quaternion_distance(&a, &neg), 0.0);
    assert!((quaternion_distance(&a, &[1.0, 0.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
}

fn sinusoid(t: usize, bin: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|k| vec![(2.0 * PI * bin as f64 * k as f64 / t as f64).sin()])
        .collect()
}

/// Direct DFT power spectrum and cumulative-sum distance.
fn emd_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let t = a.len();
    let power = |x: &[Vec<f64>]| -> Vec<f64> {
        (0..=t / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, row) in x.iter().enumerate() {
                    let w = -2.0 * PI * (k * n) as f64 / t as f64;
                    re += row[0] * w.cos();
                    im += row[0] * w.sin();
                }
                re * re + im * im
            })
            .collect()
    };
    let (pa, pb) = (power(a), power(b));
    let (sa, sb): (f64, f64) = (pa.iter().sum(), pb.iter().sum());
    let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0);
    for k in 0..pa.len() {
        ca += pa[k] / sa;
        cb += pb[k] / sb;
        d += (ca - cb).abs();
    }
    d
}

#[test]
fn npss_examples() {
    let x = sinusoid(64, 4);
    assert_eq!(npss(&x, &x).unwrap(), 0.0);
    let y = sinusoid(64, 8);
    let got = npss(&y, &x).unwrap();
    let want = emd_oracle(&y, &x);
    assert!((got - want).abs() < 1e-9);
    // Two spikes four bins apart.
    assert!((got - 4.0).abs() < 1e-9);

    // A silent ground-truth channel does not count.
    let add = |rows: &[Vec<f64>], c: f64| -> Vec<Vec<f64>> {
        rows.iter().enumerate().map(|(k, r)| vec![r[0], c * k as f64]).collect()
    };
    let with_silent = npss(&add(&y, 1.0), &add(&x, 0.0)).unwrap();
    assert!((with_silent - got).abs() < 1e-12);

    assert!(matches!(npss(&x[..3], &x[..3]), Err(Error::TooShort { len: 3, min: 4 })));
    assert!(matches!(npss(&x[..10], &x), Err(Error::LengthMismatch(10, 64))));
}

#[test]
fn npss_of_identical_poses_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<PoseState> = (0..16).map(|_| random_pose(&mut rng, 0.5)).collect();
    assert_eq!(npss_poses(&a, &a).unwrap(), 0.0);
}

fn poses(n: usize) -> Vec<PoseState> {
    (0..n)
        .map(|k| {
            PoseState::rest(Vector3::new(k as f64, -(k as f64), 0.93))
                .yawed(0.4 * k as f64)
                .unwrap()
        })
        .collect()
}

#[test]
fn single_grid() {
    let s = skel();
    let init = poses(6);
    let cases = protocol_grid(ProtocolKind::Single, &GridParams::default(), &init, &[], &s).unwrap();
    assert_eq!(cases.len(), 3750);
    assert!(cases.iter().enumerate().all(|(i, c)| c.index == i));
    assert!(cases.iter().all(|c| c.mask == ControlMask::only(ControlJoint::RightWrist)));
    let seeds: HashSet<u64> = cases.iter().map(|c| c.seed).collect();
    assert_eq!(seeds.len(), 3750);

    let heights = [0.5, 0.825, 1.15, 1.475, 1.8];
    let dists = [0.5, 1.625, 2.75, 3.875, 5.0];
    for c in cases.iter().step_by(7) {
        let p = &init[c.initial];
        let g = c.goals[0].get(ControlJoint::RightWrist).unwrap();
        assert_eq!(g.frame, 239);
        assert!((g.position.z - heights[c.height.unwrap()]).abs() < 1e-12);
        let d = g.position.xy() - p.pelvis_translation.xy();
        assert!((d.norm() - dists[c.distance.unwrap()]).abs() < 1e-9);
        let rel = d.y.atan2(d.x) - p.yaw().unwrap() - 2.0 * PI / 5.0 * c.directions[0] as f64;
        assert!(rel.sin().abs() < 1e-9 && rel.cos() > 0.0);
        assert!(c.goals[0].heading.is_none());
    }
    assert_eq!((cases[1].trial, cases[5].distance), (1, Some(1)));
    let again = protocol_grid(ProtocolKind::Single, &GridParams::default(), &init, &[], &s).unwrap();
    assert_eq!(again, cases);
    assert!(matches!(
        protocol_grid(ProtocolKind::Single, &GridParams::default(), &init[..5], &[], &s),
        Err(Error::InsufficientInitialPoses { needed: 6, got: 5 })
    ));
}

#[test]
fn sequential_grid() {
    let s = skel();
    let init = poses(6);
    let cases = protocol_grid(ProtocolKind::Sequential, &GridParams::default(), &init, &[], &s).unwrap();
    assert_eq!(cases.len(), 3750);
    let paths: HashSet<(usize, Vec<usize>)> = cases.iter().map(|c| (c.initial, c.directions.clone())).collect();
    assert_eq!(paths.len(), 750);
    for p in 0..6 {
        assert_eq!(paths.iter().filter(|(i, _)| *i == p).count(), 125);
    }
    for c in cases.iter().step_by(11) {
        let mut at = init[c.initial].pelvis_translation.xy();
        for g in &c.goals {
            let w = g.get(ControlJoint::RightWrist).unwrap().position;
            assert_eq!(w.z, 1.0);
            assert!(((w.xy() - at).norm() - 5.0).abs() < 1e-9);
            at = w.xy();
        }
    }
}

#[test]
fn multi_grid() {
    let s = skel();
    let init = poses(6);
    let targets = poses(8);
    let cases = protocol_grid(ProtocolKind::Multi, &GridParams::default(), &init, &targets, &s).unwrap();
    assert_eq!(cases.len(), 6 * 6 * 5 * 5 * 5);
    let c = &cases[0];
    assert_eq!(c.mask, ControlMask::ALL);
    let g = &c.goals[0];
    // The placed target keeps the target pose's shape.
    let pelvis = g.get(ControlJoint::Pelvis).unwrap().position;
    let head = g.get(ControlJoint::Head).unwrap().position;
    let fk = forward_kinematics(&targets[0], &s).unwrap();
    let want = (fk[s.control_index(ControlJoint::Head)] - fk[0]).norm();
    assert!(((head - pelvis).norm() - want).abs() < 1e-9);
    assert!(((pelvis.xy() - init[0].pelvis_translation.xy()).norm() - 0.5).abs() < 1e-9);
    assert!(protocol_grid(ProtocolKind::Multi, &GridParams::default(), &init, &targets[..2], &s).is_err());
}

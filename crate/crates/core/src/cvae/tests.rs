use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::intention::ControlMask;
use crate::kinematics::random_pose;
use crate::kinematics::ControlJoint;
use crate::tape::check_gradients;

fn random_intention(rng: &mut ChaCha8Rng, mask: ControlMask) -> IntentionVector {
    let mut v3 = || {
        Vector3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        )
    };
    let mut control = [Vector3::zeros(); 6];
    for j in mask.active_joints() {
        control[j.slot()] = v3();
    }
    IntentionVector {
        pelvis_intention: Vector2::new(0.7, -0.3),
        orientation_intention: Vector2::new(-0.2, 0.4),
        control_intentions: control,
        mask,
    }
}

fn random_mask(rng: &mut ChaCha8Rng) -> ControlMask {
    let mut m = ControlMask::NONE;
    for a in m.active.iter_mut() {
        *a = rng.random_bool(0.5);
    }
    m
}

#[test]
fn attention_mask_examples() {
    assert_eq!(attention_mask_from(&ControlMask::ALL), [true; 9]);
    let none = attention_mask_from(&ControlMask::NONE);
    assert_eq!(&none[..3], &[true; 3]);
    assert_eq!(&none[3..], &[false; 6]);
    let wrist = attention_mask_from(&ControlMask::only(ControlJoint::RightWrist));
    assert_eq!(wrist[3..].iter().filter(|o| **o).count(), 1);
    assert!(wrist[8]);
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut c = ModelConfig { heads: 7, ..ModelConfig::default() };
    assert!(c.validate().is_err());
    c = ModelConfig::default();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    c = ModelConfig::default();
    c.layers = 0;
    assert!(c.validate().is_err());
}

#[test]
fn default_shapes_and_determinism() {
    let model = Cvae::new(ModelConfig::default(), NormStats::identity(), 3).unwrap();
    let again = Cvae::new(ModelConfig::default(), NormStats::identity(), 3).unwrap();
    assert_eq!(model.param_count(), again.param_count());
    assert_eq!(model.params(), again.params());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pose = random_pose(&mut rng, 0.4);
    let next = random_pose(&mut rng, 0.4);
    let delta = crate::kinematics::compute_delta(&pose, &next).unwrap();
    let intent = random_intention(&mut rng, ControlMask::only(ControlJoint::RightWrist));
    let a = model
        .encode(&pose, &delta, &intent, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let b = model
        .encode(&pose, &delta, &intent, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mean.len(), 64);
    assert_eq!(a.log_variance.len(), 64);

    let z0 = vec![0.0; 64];
    let d0 = model.decode(&pose, &z0, &intent).unwrap();
    assert_eq!(d0, model.decode(&pose, &z0, &intent).unwrap());
    assert_eq!(d0.to_vec().len(), 134);
    let z1: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
    assert_ne!(d0, model.decode(&pose, &z1, &intent).unwrap());
    assert!(model.decode(&pose, &z0[..3], &intent).is_err());
}

#[test]
fn inactive_tokens_never_leak() {
    let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let mask = random_mask(&mut rng);
        let pose = random_pose(&mut rng, 0.5);
        let delta = crate::kinematics::compute_delta(&pose, &random_pose(&mut rng, 0.5)).unwrap();
        let intent = random_intention(&mut rng, mask);
        let mut poked = intent.clone();
        for slot in 0..6 {
            if !mask.active[slot] {
                poked.control_intentions[slot] = Vector3::new(5.0, -3.0, 9.0);
            }
        }
        let z: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(
            model.decode(&pose, &z, &intent).unwrap(),
            model.decode(&pose, &z, &poked).unwrap()
        );
        let s = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            model.encode(&pose, &delta, &intent, &mut s.clone()).unwrap(),
            model.encode(&pose, &delta, &poked, &mut s.clone()).unwrap()
        );
    }
}

#[test]
fn yaw_and_translation_do_not_change_prediction() {
    let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pose = random_pose(&mut rng, 0.3);
    let intent = random_intention(&mut rng, ControlMask::ALL);
    let z = vec![0.1; 16];
    let base = model.decode(&pose, &z, &intent).unwrap();

    let angle = 1.1;
    let moved = pose.yawed(angle).unwrap();
    let r = crate::kinematics::rot6d::yaw_matrix(angle);
    let mut turned = intent.clone();
    turned.pelvis_intention = (r * intent.pelvis_intention.push(0.0)).xy();
    turned.orientation_intention = (r * intent.orientation_intention.push(0.0)).xy();
    for c in turned.control_intentions.iter_mut() {
        *c = r * *c;
    }
    let out = model.decode(&moved, &z, &turned).unwrap();
    for (a, b) in base.to_vec().iter().zip(out.to_vec()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 8).unwrap();
    let bytes = model.to_bytes();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Cvae::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    assert_eq!(back.stats(), model.stats());
    let mut broken = bytes.clone();
    broken[0] = b'X';
    assert!(Cvae::read_from(&mut broken.as_slice()).is_err());
    assert!(Cvae::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let model = Cvae::new(cfg.clone(), NormStats::identity(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let masks = [ControlMask::only(ControlJoint::LeftWrist), ControlMask::ALL];
    let mut rand_t = |r: usize, c: usize| {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let pose = rand_t(2, POSE_DIM);
    let z = rand_t(2, cfg.latent_dim);
    let intent = rand_t(2, INTENTION_DIM);
    let target = rand_t(2, DELTA_DIM);
    let mut params = model.params().to_vec();
    let report = check_gradients(
        &mut params,
        |tape| {
            let pv = tape.constant(pose.clone());
            let zv = tape.constant(z.clone());
            let iv = tape.constant(intent.clone());
            let tv = tape.constant(target.clone());
            let mut g = Graph {
                tape,
                rng: None,
                dropout: 0.0,
            };
            let out = model.decode_graph(&mut g, pv, zv, iv, &masks);
            let diff = g.tape.sub(out, tv);
            let sq = g.tape.square(diff);
            g.tape.mean(sq)
        },
        1e-3,
        1e-7,
        Some(6),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

//! Training objective: delta reconstruction, KL to the unit Gaussian prior,
//! and a control-joint position term through differentiable kinematics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cvae::{Cvae, Graph};
use crate::error::{Error, Result};
use crate::intention::{ControlMask, IntentionVector};
use crate::kinematics::rot6d::{rot6d_to_matrix, yaw_matrix};
use crate::kinematics::{
    compute_delta, forward_kinematics, ChannelStats, ControlJoint, KinematicSkeleton, PoseState,
    DELTA_DIM, NUM_JOINTS,
};
use crate::tape::{Tape, Tensor, Var};

/// Unweighted loss terms plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub joint: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.recon += o.recon;
        self.kl += o.kl;
        self.joint += o.joint;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.kl, self.joint].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub joint: f64,
}

/// `½ Σ (μ² + e^{lv} − 1 − lv)`: KL from N(μ, e^{lv}) to N(0, I).
pub fn kl_divergence(mean: &[f64], log_variance: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_variance)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// One supervised transition: the model sees `pose` and is asked to produce
/// the step to `next`.
#[derive(Debug, Clone)]
pub struct Transition {
    pub pose: PoseState,
    pub next: PoseState,
    pub intention: IntentionVector,
    pub epsilon: Vec<f64>,
    /// Share of the batch objective carried by this row.
    pub weight: f64,
}

/// Constant tensors for a batch of transitions.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub pose: Tensor,
    pub delta: Tensor,
    pub intention: Tensor,
    pub epsilon: Tensor,
    pub masks: Vec<ControlMask>,
    /// Current root in its own heading frame, n × 9.
    root: Tensor,
    /// Current local joint rotations, one n × 9 tensor per body joint.
    locals: Vec<Tensor>,
    next_z: Tensor,
    /// Ground-truth next positions of the control joints in the current
    /// heading frame, one n × 3 tensor per control slot.
    targets: Vec<Tensor>,
    /// `1/|active|` for active slots, else 0; one n × 1 tensor per slot.
    slot_weights: Vec<Tensor>,
    weights: Tensor,
}

fn mat9(m: &nalgebra::Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    out.copy_from_slice(m.as_slice());
    out
}

impl TransitionBatch {
    pub fn new(model: &Cvae, skeleton: &KinematicSkeleton, rows: &[Transition]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("empty transition batch".into()));
        }
        let n = rows.len();
        let latent = model.config().latent_dim;
        let (mut pose, mut delta, mut intention, mut epsilon) = (vec![], vec![], vec![], vec![]);
        let mut root = Vec::with_capacity(n * 9);
        let mut locals: Vec<Vec<f64>> = (0..NUM_JOINTS - 1).map(|_| Vec::with_capacity(n * 9)).collect();
        let mut next_z = Vec::with_capacity(n);
        let mut targets: Vec<Vec<f64>> = (0..6).map(|_| Vec::with_capacity(n * 3)).collect();
        let mut slot_weights: Vec<Vec<f64>> = (0..6).map(|_| Vec::with_capacity(n)).collect();
        let mut weights = Vec::with_capacity(n);
        for r in rows {
            if r.epsilon.len() != latent {
                return Err(Error::ShapeMismatch(format!(
                    "epsilon has {} channels, latent is {latent}",
                    r.epsilon.len()
                )));
            }
            pose.extend(model.pose_input(&r.pose)?);
            delta.extend(model.delta_input(&compute_delta(&r.pose, &r.next)?));
            intention.extend(model.intention_input(&r.pose, &r.intention)?);
            epsilon.extend_from_slice(&r.epsilon);

            let yaw = r.pose.yaw()?;
            let unyaw = yaw_matrix(-yaw);
            root.extend(mat9(&(unyaw * r.pose.root_matrix()?)));
            for (j, l) in locals.iter_mut().enumerate() {
                l.extend(mat9(&rot6d_to_matrix(&r.pose.joint_rotations[j])?));
            }
            next_z.push(r.next.pelvis_translation.z);
            let origin = Vector3::new(r.pose.pelvis_translation.x, r.pose.pelvis_translation.y, 0.0);
            let fk = forward_kinematics(&r.next, skeleton)?;
            let mask = r.intention.mask;
            let k = mask.count();
            for (slot, joint) in ControlJoint::ALL.iter().enumerate() {
                let p = unyaw * (fk[skeleton.control_index(*joint)] - origin);
                targets[slot].extend_from_slice(p.as_slice());
                let w = if mask.active[slot] { 1.0 / k as f64 } else { 0.0 };
                slot_weights[slot].push(w);
            }
            weights.push(r.weight);
        }
        let t = |c: usize, v: Vec<f64>| Tensor::from_vec(n, c, v);
        Ok(Self {
            pose: t(pose.len() / n, pose),
            delta: t(DELTA_DIM, delta),
            intention: t(intention.len() / n, intention),
            epsilon: t(latent, epsilon),
            masks: rows.iter().map(|r| r.intention.mask).collect(),
            root: t(9, root),
            locals: locals.into_iter().map(|l| t(9, l)).collect(),
            next_z: t(1, next_z),
            targets: targets.into_iter().map(|v| t(3, v)).collect(),
            slot_weights: slot_weights.into_iter().map(|v| t(1, v)).collect(),
            weights: t(1, weights),
        })
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }
}

/// Loss vars on a tape; each is a 1 × 1 row-weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub joint: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).scalar();
        LossBreakdown {
            total: v(self.total),
            recon: v(self.recon),
            kl: v(self.kl),
            joint: v(self.joint),
        }
    }
}

/// Gram–Schmidt of n × 6 rows into n × 9 column-major rotation matrices.
pub fn gram_schmidt(tape: &mut Tape<'_>, x: Var) -> Var {
    let a = tape.slice_cols(x, 0, 3);
    let b = tape.slice_cols(x, 3, 3);
    let c1 = tape.normalize_rows(a);
    let d = tape.dot_rows(c1, b);
    let proj = tape.mul_column(c1, d);
    let perp = tape.sub(b, proj);
    let c2 = tape.normalize_rows(perp);
    let c3 = tape.cross_rows(c1, c2);
    tape.concat_cols(&[c1, c2, c3])
}

/// Joints whose positions are needed to place the control joints.
fn needed_joints(skeleton: &KinematicSkeleton) -> [bool; NUM_JOINTS] {
    let mut need = [false; NUM_JOINTS];
    for j in skeleton.control_indices() {
        let mut cur = Some(j);
        while let Some(c) = cur {
            need[c] = true;
            cur = skeleton.parents()[c];
        }
    }
    need
}

/// Control-joint positions after applying the predicted raw delta, in the
/// current heading frame. Returns one n × 3 var per control slot.
fn predicted_control_positions(
    tape: &mut Tape<'_>,
    skeleton: &KinematicSkeleton,
    batch: &TransitionBatch,
    raw: Var,
) -> Vec<Var> {
    let n = batch.rows();
    let need = needed_joints(skeleton);
    let mut rot: Vec<Option<Var>> = vec![None; NUM_JOINTS];
    let mut pos: Vec<Option<Var>> = vec![None; NUM_JOINTS];

    let root_now = tape.constant(batch.root.clone());
    let d_root = tape.slice_cols(raw, 2, 6);
    let d_root = gram_schmidt(tape, d_root);
    rot[0] = Some(tape.mat3_mul(root_now, d_root));
    let step = tape.slice_cols(raw, 0, 2);
    let z = tape.constant(batch.next_z.clone());
    pos[0] = Some(tape.concat_cols(&[step, z]));

    for j in 1..NUM_JOINTS {
        if !need[j] {
            continue;
        }
        let p = skeleton.parents()[j].expect("non-root joint has a parent");
        let parent_rot = rot[p].expect("parents precede children");
        let o = skeleton.offsets()[j];
        let offset = Tensor::from_vec(n, 3, (0..n).flat_map(|_| [o.x, o.y, o.z]).collect());
        let offset = tape.constant(offset);
        let moved = tape.mat3_vec(parent_rot, offset);
        pos[j] = Some(tape.add(pos[p].expect("parent position"), moved));
        let is_parent = (j + 1..NUM_JOINTS).any(|c| need[c] && skeleton.parents()[c] == Some(j));
        if is_parent {
            let local_now = tape.constant(batch.locals[j - 1].clone());
            let d = tape.slice_cols(raw, 8 + 6 * (j - 1), 6);
            let d = gram_schmidt(tape, d);
            let local = tape.mat3_mul(local_now, d);
            rot[j] = Some(tape.mat3_mul(parent_rot, local));
        }
    }
    skeleton
        .control_indices()
        .iter()
        .map(|j| pos[*j].expect("control joint position"))
        .collect()
}

fn const_rows(n: usize, row: &[f64]) -> Tensor {
    Tensor::from_vec(n, row.len(), (0..n).flat_map(|_| row.iter().copied()).collect())
}

/// Record the three terms and their weighted total given the network
/// outputs: standardized delta prediction `pred` and posterior `mean`,
/// `logvar`.
#[allow(clippy::too_many_arguments)]
pub fn record_terms(
    tape: &mut Tape<'_>,
    delta_stats: &ChannelStats,
    skeleton: &KinematicSkeleton,
    batch: &TransitionBatch,
    pred: Var,
    mean: Var,
    logvar: Var,
    weights: LossWeights,
) -> LossVars {
    let n = batch.rows();
    let row_w = tape.constant(batch.weights.clone());
    let weighted = |tape: &mut Tape<'_>, per_row: Var| {
        let w = tape.mul(per_row, row_w);
        tape.sum(w)
    };

    let target = tape.constant(batch.delta.clone());
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    let recon_rows = tape.sum_cols(sq);
    let recon_rows = tape.scale(recon_rows, 1.0 / DELTA_DIM as f64);

    let mu2 = tape.square(mean);
    let var = tape.exp(logvar);
    let kl = tape.add(mu2, var);
    let kl = tape.sub(kl, logvar);
    let kl_rows = tape.sum_cols(kl);
    let latent = tape.value(mean).cols() as f64;
    let kl_rows = tape.scale(kl_rows, 0.5);
    let shift = tape.constant(Tensor::filled(n, 1, -0.5 * latent));
    let kl_rows = tape.add(kl_rows, shift);

    let std = tape.constant(const_rows(n, &delta_stats.std));
    let mu = tape.constant(const_rows(n, &delta_stats.mean));
    let raw = tape.mul(pred, std);
    let raw = tape.add(raw, mu);
    let predicted = predicted_control_positions(tape, skeleton, batch, raw);
    let mut joint_rows: Option<Var> = None;
    for (slot, p) in predicted.into_iter().enumerate() {
        let t = tape.constant(batch.targets[slot].clone());
        let d = tape.sub(p, t);
        let d2 = tape.square(d);
        let dist2 = tape.sum_cols(d2);
        let w = tape.constant(batch.slot_weights[slot].clone());
        let term = tape.mul(dist2, w);
        joint_rows = Some(match joint_rows {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let joint_rows = joint_rows.expect("six control slots");

    let recon = weighted(tape, recon_rows);
    let kl = weighted(tape, kl_rows);
    let joint = weighted(tape, joint_rows);
    let kl_w = tape.scale(kl, weights.kl);
    let joint_w = tape.scale(joint, weights.joint);
    let total = tape.add(recon, kl_w);
    let total = tape.add(total, joint_w);
    LossVars {
        total,
        recon,
        kl,
        joint,
    }
}

/// Full encoder → reparameterized sample → decoder pass and the loss.
/// Returns the loss vars and the standardized delta prediction.
pub fn record_loss(
    g: &mut Graph<'_, '_>,
    model: &Cvae,
    skeleton: &KinematicSkeleton,
    batch: &TransitionBatch,
    weights: LossWeights,
) -> (LossVars, Var) {
    let pose = g.tape.constant(batch.pose.clone());
    let delta = g.tape.constant(batch.delta.clone());
    let intent = g.tape.constant(batch.intention.clone());
    let (mean, logvar) = model.encode_graph(g, pose, delta, intent, &batch.masks);
    let half = g.tape.scale(logvar, 0.5);
    let sigma = g.tape.exp(half);
    let eps = g.tape.constant(batch.epsilon.clone());
    let noise = g.tape.mul(sigma, eps);
    let z = g.tape.add(mean, noise);
    let pred = model.decode_graph(g, pose, z, intent, &batch.masks);
    let vars = record_terms(
        g.tape,
        &model.stats().delta,
        skeleton,
        batch,
        pred,
        mean,
        logvar,
        weights,
    );
    (vars, pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::ModelConfig;
    use crate::intention::{assemble_intention, GoalSpec};
    use crate::kinematics::{apply_delta, random_pose, NormStats, ZMode};
    use crate::tape::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn transitions(
        model: &Cvae,
        s: &KinematicSkeleton,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> Vec<Transition> {
        (0..n)
            .map(|k| {
                let mut pose = random_pose(rng, 0.3);
                pose.pelvis_translation.z = 0.9;
                let mut next = random_pose(rng, 0.3);
                next.pelvis_translation = pose.pelvis_translation
                    + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.01);
                let mask = if k % 3 == 0 {
                    ControlMask::ALL
                } else {
                    ControlMask::only(ControlJoint::ALL[k % 6])
                };
                let mut goals = GoalSpec::default();
                for j in ControlJoint::ALL {
                    goals.joints.insert(
                        j,
                        crate::intention::JointGoal {
                            position: Vector3::new(1.0, 0.5, 1.0),
                            frame: 20,
                        },
                    );
                }
                let intention = assemble_intention(&pose, s, &goals, &mask, 0).unwrap();
                let latent = model.config().latent_dim;
                Transition {
                    pose,
                    next,
                    intention,
                    epsilon: (0..latent).map(|_| rng.sample(StandardNormal)).collect(),
                    weight: 1.0 / n as f64,
                }
            })
            .collect()
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_divergence(&[1.0, 0.0, 0.0], &[0.0; 3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let closed = kl_divergence(&mean, &lv);
            // E_q[log q(z) − log p(z)] by sampling.
            let n = 400_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let mut term = 0.0;
                for (m, l) in mean.iter().zip(&lv) {
                    let e: f64 = rng.sample(StandardNormal);
                    let z = m + (0.5 * l).exp() * e;
                    term += -0.5 * e * e - 0.5 * l + 0.5 * z * z;
                }
                acc += term;
            }
            let mc = acc / n as f64;
            assert!(((mc - closed) / closed).abs() < 0.02, "{mc} vs {closed}");
        }
    }

    /// Independent joint term: apply the delta with the plain pose code,
    /// run FK and compare in the world frame.
    fn oracle_joint(s: &KinematicSkeleton, t: &Transition, raw: &[f64]) -> f64 {
        let delta = crate::kinematics::DeltaFeature::from_slice(raw).unwrap();
        let moved = apply_delta(&t.pose, &delta, ZMode::Set(t.next.pelvis_translation.z)).unwrap();
        let a = forward_kinematics(&moved, s).unwrap();
        let b = forward_kinematics(&t.next, s).unwrap();
        let mask = t.intention.mask;
        let mut sum = 0.0;
        for j in mask.active_joints() {
            let i = s.control_index(j);
            sum += (a[i] - b[i]).norm_squared();
        }
        sum / mask.count() as f64
    }

    #[test]
    fn terms_match_independent_evaluation() {
        let s = KinematicSkeleton::default_rig();
        let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows = transitions(&model, &s, &mut rng, 6);
        let batch = TransitionBatch::new(&model, &s, &rows).unwrap();
        let latent = model.config().latent_dim;
        let pred: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut d = compute_delta(&r.pose, &r.next).unwrap().to_vec();
                for v in d.iter_mut() {
                    *v += rng.random_range(-0.05..0.05);
                }
                d
            })
            .collect();
        let mean: Vec<Vec<f64>> = (0..6).map(|_| (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let lv: Vec<Vec<f64>> = (0..6).map(|_| (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

        let params: Vec<Tensor> = vec![];
        let mut tape = Tape::new(&params);
        let p = tape.constant(Tensor::from_rows(&pred));
        let m = tape.constant(Tensor::from_rows(&mean));
        let l = tape.constant(Tensor::from_rows(&lv));
        let w = LossWeights { kl: 0.3, joint: 2.0 };
        let vars = record_terms(&mut tape, &model.stats().delta, &s, &batch, p, m, l, w);
        let got = vars.breakdown(&tape);

        let mut want = LossBreakdown::default();
        for (k, r) in rows.iter().enumerate() {
            let target = compute_delta(&r.pose, &r.next).unwrap().to_vec();
            let recon: f64 = pred[k].iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / DELTA_DIM as f64;
            want.recon += r.weight * recon;
            want.kl += r.weight * kl_divergence(&mean[k], &lv[k]);
            want.joint += r.weight * oracle_joint(&s, r, &pred[k]);
        }
        want.total = want.recon + 0.3 * want.kl + 2.0 * want.joint;
        for (a, b) in [
            (got.recon, want.recon),
            (got.kl, want.kl),
            (got.joint, want.joint),
            (got.total, want.total),
        ] {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn perfect_prediction_leaves_only_kl() {
        let s = KinematicSkeleton::default_rig();
        let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let rows = transitions(&model, &s, &mut rng, 4);
        let batch = TransitionBatch::new(&model, &s, &rows).unwrap();
        let params: Vec<Tensor> = vec![];
        let mut tape = Tape::new(&params);
        let p = tape.constant(batch.delta.clone());
        let latent = model.config().latent_dim;
        let m = tape.constant(Tensor::filled(4, latent, 0.5));
        let l = tape.constant(Tensor::zeros(4, latent));
        let w = LossWeights { kl: 1e-3, joint: 1.0 };
        let b = record_terms(&mut tape, &model.stats().delta, &s, &batch, p, m, l, w).breakdown(&tape);
        assert_eq!(b.recon, 0.0);
        assert!(b.joint < 1e-24, "{b:?}");
        assert!((b.total - 1e-3 * b.kl).abs() < 1e-15);
        assert!((b.kl - 0.5 * 0.25 * latent as f64).abs() < 1e-12);
    }

    #[test]
    fn unweighted_joint_term_is_still_reported() {
        let s = KinematicSkeleton::default_rig();
        let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let rows = transitions(&model, &s, &mut rng, 3);
        let batch = TransitionBatch::new(&model, &s, &rows).unwrap();
        let run = |joint: f64| {
            let mut tape = Tape::new(model.params());
            let mut g = Graph { tape: &mut tape, rng: None, dropout: 0.0 };
            let (v, _) = record_loss(&mut g, &model, &s, &batch, LossWeights { kl: 1e-3, joint });
            v.breakdown(&tape)
        };
        let off = run(0.0);
        let on = run(1.0);
        assert!(off.joint > 0.0);
        assert_eq!(off.joint, on.joint);
        assert!((off.total - (off.recon + 1e-3 * off.kl)).abs() < 1e-12);
        assert!((on.total - off.total - on.joint).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let s = KinematicSkeleton::default_rig();
        let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let rows = transitions(&model, &s, &mut rng, 7);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        let eval = |rows: &[Transition]| {
            let batch = TransitionBatch::new(&model, &s, rows).unwrap();
            let mut tape = Tape::new(model.params());
            let mut g = Graph { tape: &mut tape, rng: None, dropout: 0.0 };
            let (v, _) = record_loss(&mut g, &model, &s, &batch, LossWeights { kl: 1e-3, joint: 1.0 });
            v.breakdown(&tape).total
        };
        assert!((eval(&rows) - eval(&shuffled)).abs() < 1e-6);
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let s = KinematicSkeleton::default_rig();
        let model = Cvae::new(ModelConfig::tiny(), NormStats::identity(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let rows = transitions(&model, &s, &mut rng, 3);
        let batch = TransitionBatch::new(&model, &s, &rows).unwrap();
        let mut params = model.params().to_vec();
        let report = check_gradients(
            &mut params,
            |tape| {
                let mut g = Graph { tape, rng: None, dropout: 0.0 };
                record_loss(&mut g, &model, &s, &batch, LossWeights { kl: 1e-3, joint: 1.0 }).0.total
            },
            1e-3,
            1e-7,
            Some(2),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

//! Dataset preparation, the training objective and the training loop.

mod loss;
mod preprocess;
mod sampling;
pub mod synth;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{
    gram_schmidt, kl_divergence, record_loss, record_terms, LossBreakdown, LossVars, LossWeights,
    Transition, TransitionBatch,
};
pub use preprocess::{
    fit_stats, preprocess, resample, split_sizes, window_clip, Dataset, PreprocessConfig,
    MIN_CLIP_FRAMES,
};
pub use sampling::{sample_control_mask, sample_pseudo_goal, scheduled_ar_steps};
pub use synth::synth_dataset;

use crate::clip::MotionClip;
use crate::cvae::{Cvae, Graph};
use crate::error::{Error, Result};
use crate::intention::assemble_intention;
use crate::kinematics::{apply_delta, DeltaFeature, KinematicSkeleton, ZMode};
use crate::seeding::derive_seed;
use crate::tape::{Gradients, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda_kl: f64,
    pub lambda_joint: f64,
    pub ss_start_epoch: usize,
    pub ss_full_epoch: usize,
    pub ss_max_ar_steps: usize,
    pub seed: u64,
    /// Rollouts drawn from each window per epoch.
    pub samples_per_window: usize,
    /// Cut gradients between autoregressive steps.
    pub detach_rollout: bool,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    /// Rows per parallel work unit; fixed so the reduction order, and with it
    /// the result, does not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 50,
            lambda_kl: 1e-3,
            lambda_joint: 1.0,
            ss_start_epoch: 10,
            ss_full_epoch: 50,
            ss_max_ar_steps: 10,
            seed: 0,
            samples_per_window: 1,
            detach_rollout: true,
            grad_clip: None,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    /// Settings from the original large-scale run.
    pub fn paper() -> Self {
        Self {
            batch_size: 512,
            epochs: 1800,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.chunk_size == 0 {
            return bad("batch_size, epochs and chunk_size must be at least 1".into());
        }
        if self.samples_per_window == 0 {
            return bad("samples_per_window must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.lambda_kl < 0.0 || self.lambda_joint < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.ss_start_epoch > self.ss_full_epoch {
            return bad(format!(
                "ss_start_epoch {} exceeds ss_full_epoch {}",
                self.ss_start_epoch, self.ss_full_epoch
            ));
        }
        if self.ss_max_ar_steps == 0 {
            return bad("ss_max_ar_steps must be at least 1".into());
        }
        if !self.detach_rollout {
            return bad("only detached rollouts are implemented (detach_rollout = true)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            kl: self.lambda_kl,
            joint: self.lambda_joint,
        }
    }
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ar_steps: usize,
    pub rollouts: usize,
    /// Mean per transition over the epoch.
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Clone, Copy)]
struct Rollout {
    window: usize,
    seed: u64,
}

/// Training state that survives between epochs.
pub struct Trainer<'a> {
    pub model: Cvae,
    pub config: TrainConfig,
    skeleton: &'a KinematicSkeleton,
    optimizer: Adam,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Cvae, skeleton: &'a KinematicSkeleton, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), config.learning_rate);
        Ok(Self {
            model,
            config,
            skeleton,
            optimizer,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `windows`.
    pub fn run_epoch(&mut self, windows: &[MotionClip]) -> Result<EpochStats> {
        let started = Instant::now();
        self.epoch += 1;
        let epoch = self.epoch;
        let k = scheduled_ar_steps(epoch, &self.config);
        let epoch_seed = derive_seed(self.config.seed, epoch as u64);
        let mut items = Vec::new();
        for (w, clip) in windows.iter().enumerate() {
            if clip.frames.len() < k + 1 {
                continue;
            }
            for s in 0..self.config.samples_per_window {
                items.push(Rollout {
                    window: w,
                    seed: derive_seed(epoch_seed, (w * self.config.samples_per_window + s) as u64),
                });
            }
        }
        if items.is_empty() {
            return Err(Error::TooShort {
                len: windows.iter().map(|w| w.frames.len()).max().unwrap_or(0),
                min: k + 1,
            });
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mut total = LossBreakdown::default();
        for (b, batch) in items.chunks(self.config.batch_size).enumerate() {
            let weight = 1.0 / (batch.len() * k) as f64;
            let model = &self.model;
            let skeleton = self.skeleton;
            let weights = self.config.weights();
            let results: Vec<Result<(Gradients, LossBreakdown)>> = batch
                .par_chunks(self.config.chunk_size)
                .map(|chunk| rollout_chunk(model, skeleton, windows, chunk, k, weight, weights))
                .collect();
            let mut grads = Gradients::empty(model.params().len());
            let mut loss = LossBreakdown::default();
            for r in results {
                let (g, l) = r?;
                grads.accumulate(&g);
                loss.add(&l);
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("{loss:?}, gradient norm {}", grads.global_norm()),
                });
            }
            if let Some(c) = self.config.grad_clip {
                let norm = grads.global_norm();
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            self.optimizer.step(self.model.params_mut(), &grads);
            let share = batch.len() as f64 / items.len() as f64;
            total.total += share * loss.total;
            total.recon += share * loss.recon;
            total.kl += share * loss.kl;
            total.joint += share * loss.joint;
        }
        if !self.model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: items.len().div_ceil(self.config.batch_size),
                detail: "parameters became non-finite".into(),
            });
        }
        Ok(EpochStats {
            epoch,
            ar_steps: k,
            rollouts: items.len(),
            loss: total,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Roll a chunk of windows forward `k` steps, feeding back predictions with
/// the graph cut between steps. Returns summed gradients and weighted loss.
fn rollout_chunk(
    model: &Cvae,
    skeleton: &KinematicSkeleton,
    windows: &[MotionClip],
    chunk: &[Rollout],
    k: usize,
    weight: f64,
    weights: LossWeights,
) -> Result<(Gradients, LossBreakdown)> {
    let latent = model.config().latent_dim;
    let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(chunk[0].seed, u64::MAX));
    let mut state = Vec::with_capacity(chunk.len());
    for (r, rng) in chunk.iter().zip(rngs.iter_mut()) {
        let clip = &windows[r.window];
        let mask = sample_control_mask(rng);
        let start = rng.random_range(0..=clip.frames.len() - 1 - k);
        let goals = sample_pseudo_goal(clip, skeleton, start, &mask, rng)?;
        state.push((clip, mask, start, goals, clip.frames[start].clone()));
    }

    let mut grads = Gradients::empty(model.params().len());
    let mut loss = LossBreakdown::default();
    for step in 0..k {
        let mut rows = Vec::with_capacity(chunk.len());
        for ((clip, mask, start, goals, pose), rng) in state.iter().zip(rngs.iter_mut()) {
            let i = start + step;
            rows.push(Transition {
                pose: pose.clone(),
                next: clip.frames[i + 1].clone(),
                intention: assemble_intention(pose, skeleton, goals, mask, i)?,
                epsilon: (0..latent).map(|_| rng.sample(StandardNormal)).collect(),
                weight,
            });
        }
        let batch = TransitionBatch::new(model, skeleton, &rows)?;
        let mut tape = Tape::new(model.params());
        let (vars, pred) = {
            let mut g = Graph {
                tape: &mut tape,
                rng: Some(&mut dropout_rng),
                dropout: model.config().dropout,
            };
            record_loss(&mut g, model, skeleton, &batch, weights)
        };
        grads.accumulate(&tape.backward(vars.total)?);
        loss.add(&vars.breakdown(&tape));
        if step + 1 < k {
            let out = tape.value(pred);
            for (r, (clip, _, start, _, pose)) in state.iter_mut().enumerate() {
                let mut raw = out.row(r).to_vec();
                model.stats().delta.destandardize(&mut raw);
                let delta = DeltaFeature::from_slice(&raw)?;
                let z = clip.frames[*start + step + 1].pelvis_translation.z;
                *pose = apply_delta(pose, &delta, ZMode::Set(z))?;
            }
        }
    }
    Ok((grads, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::ModelConfig;
    use crate::intention::ControlMask;
    use crate::kinematics::ControlJoint;
    use nalgebra::{Vector2, Vector3};

    fn small_dataset(s: &KinematicSkeleton) -> Dataset {
        let raw = synth_dataset(8, s, &mut ChaCha8Rng::seed_from_u64(51)).unwrap();
        let cfg = PreprocessConfig {
            train_fraction: 1.0,
            val_fraction: 0.0,
            ..Default::default()
        };
        preprocess(&raw, s, &cfg).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let bad = [
            TrainConfig { ss_start_epoch: 60, ..Default::default() },
            TrainConfig { ss_max_ar_steps: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { detach_rollout: false, ..Default::default() },
            TrainConfig { grad_clip: Some(-1.0), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0])];
        let mut opt = Adam::new(&params, 0.1);
        let mut tape = Tape::new(&params);
        let p = tape.param(0);
        let sq = tape.square(p);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        drop(tape);
        opt.step(&mut params, &g);
        for (x, x0) in params[0].data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - (x0 - 0.1)).abs() < 1e-6);
        }
    }

    #[test]
    fn one_epoch_smoke_and_checkpoint_round_trip() {
        let s = KinematicSkeleton::default_rig();
        let data = small_dataset(&s);
        let model = Cvae::new(ModelConfig::tiny(), data.stats.clone(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ss_start_epoch: 1,
            ss_full_epoch: 1,
            ss_max_ar_steps: 2,
            ..Default::default()
        };
        let mut trainer = Trainer::new(model, &s, cfg).unwrap();
        let stats = trainer.run_epoch(&data.train).unwrap();
        assert_eq!(stats.ar_steps, 2);
        assert!(stats.loss.is_finite() && stats.loss.total > 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        trainer.model.save(&path).unwrap();
        let back = Cvae::load(&path).unwrap();
        let pose = data.train[0].frames[3].clone();
        let goal = Vector3::new(1.0, 0.5, 1.2);
        let mut goals = crate::intention::GoalSpec::single(ControlJoint::RightWrist, goal, 40);
        goals.heading = Some(Vector2::new(1.0, 0.0));
        let mask = ControlMask::only(ControlJoint::RightWrist);
        let intent = assemble_intention(&pose, &s, &goals, &mask, 3).unwrap();
        let z = vec![0.3; 16];
        assert_eq!(
            trainer.model.decode(&pose, &z, &intent).unwrap(),
            back.decode(&pose, &z, &intent).unwrap()
        );
    }

    #[test]
    fn training_is_reproducible() {
        let s = KinematicSkeleton::default_rig();
        let data = small_dataset(&s);
        let run = || {
            let model = Cvae::new(ModelConfig::tiny(), data.stats.clone(), 2).unwrap();
            let cfg = TrainConfig { batch_size: 8, chunk_size: 3, ..Default::default() };
            let mut t = Trainer::new(model, &s, cfg).unwrap();
            let e = t.run_epoch(&data.train).unwrap();
            (e.loss, t.model.params().to_vec())
        };
        assert_eq!(run(), run());
    }
}

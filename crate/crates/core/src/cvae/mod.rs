//! Per-frame conditional VAE. Both the encoder and the decoder are small
//! transformer encoders over nine tokens: a state token followed by the
//! pelvis, orientation and six control-joint intention tokens.

mod checkpoint;
mod layout;
mod net;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::Graph;

use crate::error::{Error, Result};
use crate::intention::{ControlMask, IntentionVector, INTENTION_DIM};
use crate::kinematics::rot6d::{columns_6d, yaw_matrix};
use crate::kinematics::{DeltaFeature, NormStats, PoseState, DELTA_DIM, POSE_DIM};
use crate::tape::{Tape, Tensor, Var};
use layout::{build_layout, init_tensors, Layout};

/// State, pelvis, orientation, then one token per control joint.
pub const TOKENS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Depth of each input MLP branch.
    pub input_mlp_layers: usize,
    pub dropout: f64,
    pub control_set_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            model_dim: 64,
            layers: 4,
            heads: 8,
            ffn_dim: 64,
            input_mlp_layers: 16,
            dropout: 0.1,
            control_set_size: 6,
        }
    }
}

impl ModelConfig {
    /// Small shape used for desk training runs and gradient checks.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 16,
            model_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            input_mlp_layers: 4,
            dropout: 0.0,
            control_set_size: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_dim", self.latent_dim),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("input_mlp_layers", self.input_mlp_layers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.control_set_size != 6 {
            return Err(Error::Config(format!(
                "control_set_size must be 6, got {}",
                self.control_set_size
            )));
        }
        Ok(())
    }
}

/// Posterior statistics and the reparameterized sample drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Which of the nine tokens may be attended to as keys. The first three are
/// always open; control tokens follow the mask.
pub fn attention_mask_from(mask: &ControlMask) -> [bool; TOKENS] {
    let mut open = [true; TOKENS];
    for (slot, active) in mask.active.iter().enumerate() {
        open[3 + slot] = *active;
    }
    open
}

/// Remove the pelvis xy position and the root yaw.
pub fn canonical_pose(pose: &PoseState) -> Result<PoseState> {
    let root = pose.root_matrix()?;
    let unyaw = yaw_matrix(-crate::kinematics::yaw_of(&root));
    let mut out = pose.clone();
    out.pelvis_translation = Vector3::new(0.0, 0.0, pose.pelvis_translation.z);
    out.root_orientation = columns_6d(&(unyaw * root));
    Ok(out)
}

/// Intention channels rotated into the heading frame of yaw `yaw`.
pub fn heading_intention(intention: &IntentionVector, yaw: f64) -> Vec<f64> {
    let (s, c) = (-yaw).sin_cos();
    let rot2 = |v: &Vector2<f64>| [c * v.x - s * v.y, s * v.x + c * v.y];
    let mut out = Vec::with_capacity(INTENTION_DIM);
    out.extend(rot2(&intention.pelvis_intention));
    out.extend(rot2(&intention.orientation_intention));
    for v in &intention.control_intentions {
        let [x, y] = rot2(&v.xy());
        out.extend([x, y, v.z]);
    }
    out
}

/// A conditional VAE with its normalization statistics.
#[derive(Debug, Clone)]
pub struct Cvae {
    config: ModelConfig,
    stats: NormStats,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl Cvae {
    /// Fresh, randomly initialized model.
    pub fn new(config: ModelConfig, stats: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = build_layout(&config);
        let params = init_tensors(&shapes, seed);
        Ok(Self {
            config,
            stats,
            names,
            params,
            layout,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        stats: NormStats,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = build_layout(&config);
        if params.len() != shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, (r, c, _)), t) in names.iter().zip(&shapes).zip(&params) {
            if t.shape() != (*r, *c) {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {r}x{c}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            stats,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: NormStats) {
        self.stats = stats;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Canonicalized, standardized pose channels.
    pub fn pose_input(&self, pose: &PoseState) -> Result<Vec<f64>> {
        let mut v = canonical_pose(pose)?.to_vec();
        self.stats.pose.standardize(&mut v);
        Ok(v)
    }

    /// Heading-frame, standardized intention channels.
    pub fn intention_input(&self, pose: &PoseState, intention: &IntentionVector) -> Result<Vec<f64>> {
        let mut v = heading_intention(intention, pose.yaw()?);
        self.stats.intention.standardize(&mut v);
        Ok(v)
    }

    pub fn delta_input(&self, delta: &DeltaFeature) -> Vec<f64> {
        let mut v = delta.to_vec();
        self.stats.delta.standardize(&mut v);
        v
    }

    /// Record the encoder; returns `(mean, log_variance)` vars, each B × latent.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_, '_>,
        pose: Var,
        delta: Var,
        intent: Var,
        masks: &[ControlMask],
    ) -> (Var, Var) {
        let out = net::network(g, &self.layout.encoder, &self.config, pose, delta, intent, masks);
        let l = self.config.latent_dim;
        let mean = g.tape.slice_cols(out, 0, l);
        let logvar = g.tape.slice_cols(out, l, l);
        (mean, logvar)
    }

    /// Record the decoder; returns the standardized delta, B × 134.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_, '_>,
        pose: Var,
        z: Var,
        intent: Var,
        masks: &[ControlMask],
    ) -> Var {
        net::network(g, &self.layout.decoder, &self.config, pose, z, intent, masks)
    }

    /// Posterior over z for one frame transition (evaluation mode).
    pub fn encode(
        &self,
        pose: &PoseState,
        delta: &DeltaFeature,
        intention: &IntentionVector,
        rng: &mut ChaCha8Rng,
    ) -> Result<LatentSample> {
        let p = self.pose_input(pose)?;
        let d = self.delta_input(delta);
        let i = self.intention_input(pose, intention)?;
        let mut tape = Tape::new(&self.params);
        let (mean, logvar) = {
            let mut g = self.eval_graph(&mut tape);
            let pv = g.tape.constant(Tensor::row_vector(p));
            let dv = g.tape.constant(Tensor::row_vector(d));
            let iv = g.tape.constant(Tensor::row_vector(i));
            self.encode_graph(&mut g, pv, dv, iv, &[intention.mask])
        };
        let mean = tape.value(mean).data().to_vec();
        let log_variance = tape.value(logvar).data().to_vec();
        let epsilon: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let sample = mean
            .iter()
            .zip(&log_variance)
            .zip(&epsilon)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(LatentSample {
            mean,
            log_variance,
            epsilon,
            sample,
        })
    }

    /// Predicted next-frame delta (de-standardized) for latent `z`.
    pub fn decode(
        &self,
        pose: &PoseState,
        z: &[f64],
        intention: &IntentionVector,
    ) -> Result<DeltaFeature> {
        if z.len() != self.config.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "latent needs {} channels, got {}",
                self.config.latent_dim,
                z.len()
            )));
        }
        let p = self.pose_input(pose)?;
        let i = self.intention_input(pose, intention)?;
        let mut tape = Tape::new(&self.params);
        let out = {
            let mut g = self.eval_graph(&mut tape);
            let pv = g.tape.constant(Tensor::row_vector(p));
            let zv = g.tape.constant(Tensor::row_vector(z.to_vec()));
            let iv = g.tape.constant(Tensor::row_vector(i));
            self.decode_graph(&mut g, pv, zv, iv, &[intention.mask])
        };
        let mut v = tape.value(out).data().to_vec();
        self.stats.delta.destandardize(&mut v);
        DeltaFeature::from_slice(&v)
    }

    fn eval_graph<'t, 'p>(&self, tape: &'t mut Tape<'p>) -> Graph<'t, 'p> {
        Graph {
            tape,
            rng: None,
            dropout: 0.0,
        }
    }
}

#[cfg(test)]
mod tests;

// Shape sanity for the flattened channel groups the networks consume.
const _: () = assert!(POSE_DIM == 135 && DELTA_DIM == 134 && INTENTION_DIM == 22);

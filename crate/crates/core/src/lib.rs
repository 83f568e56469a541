//! Goal-conditioned autoregressive motion synthesis.
//!
//! A per-frame conditional VAE predicts the next pose delta from the current
//! pose, a goal-derived intention vector and a latent sample. A Gaussian
//! mixture fitted to reference poses softly pulls generated poses back toward
//! plausible configurations during long rollouts, and swapping that mixture
//! restyles the motion without retraining.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clip;
pub mod cvae;
pub mod error;
pub mod generate;
pub mod intention;
pub mod kinematics;
pub mod metrics;
pub mod rgf;
pub mod seeding;
pub mod tape;
pub mod training;

pub use error::{Error, Result};

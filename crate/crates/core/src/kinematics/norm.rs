use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over `rows`, each of length `dim`.
    pub fn fit<'a, I>(rows: I, dim: usize, floor: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        // Welford accumulation.
        for row in rows {
            if row.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "stats row has {} channels, expected {dim}",
                    row.len()
                )));
            }
            n += 1;
            for c in 0..dim {
                let d = row[c] - mean[c];
                mean[c] += d / n as f64;
                m2[c] += d * (row[c] - mean[c]);
            }
        }
        if n == 0 {
            return Err(Error::ShapeMismatch("no rows to fit statistics".into()));
        }
        let floor = floor.max(STD_FLOOR);
        let std = m2.iter().map(|v| (v / n as f64).sqrt().max(floor)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn destandardize(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }
}

/// Dataset-wide statistics for every network-facing channel group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pose: ChannelStats,
    pub delta: ChannelStats,
    pub intention: ChannelStats,
    /// Heading-frame joint coordinates (22 × 3), kept for analysis tooling.
    pub joints: ChannelStats,
}

impl NormStats {
    pub fn identity() -> Self {
        use crate::intention::INTENTION_DIM;
        use crate::kinematics::{DELTA_DIM, NUM_JOINTS, POSE_DIM};
        Self {
            pose: ChannelStats::identity(POSE_DIM),
            delta: ChannelStats::identity(DELTA_DIM),
            intention: ChannelStats::identity(INTENTION_DIM),
            joints: ChannelStats::identity(NUM_JOINTS * 3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn floor_applies_to_constant_channels() {
        let rows = [vec![1.0, 2.0], vec![1.0, 4.0]];
        let s = ChannelStats::fit(rows.iter().map(|r| r.as_slice()), 2, 0.0).unwrap();
        assert_eq!(s.mean, vec![1.0, 3.0]);
        assert_eq!(s.std[0], STD_FLOOR);
        assert!((s.std[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn standardize_round_trip(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 2..20),
                                  x in prop::collection::vec(-100.0f64..100.0, 5)) {
            let s = ChannelStats::fit(rows.iter().map(|r| r.as_slice()), 5, 0.0).unwrap();
            prop_assert!(s.std.iter().all(|v| *v >= STD_FLOOR));
            let mut y = x.clone();
            s.standardize(&mut y);
            s.destandardize(&mut y);
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

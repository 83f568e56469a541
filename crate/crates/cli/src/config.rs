//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then command-line flags. The resolved document is written next to every
//! artifact as `<artifact>.config.toml`.

use std::path::{Path, PathBuf};

use motionctl::cvae::ModelConfig;
use motionctl::generate::EpisodeSpec;
use motionctl::metrics::{DtgAggregate, GridParams};
use motionctl::rgf::GmmConfig;
use motionctl::training::{PreprocessConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub clips: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { clips: 200, seed: 0 }
    }
}

/// Which training frames become mixture samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Keep every `stride`-th frame of every training window.
    pub stride: usize,
    /// Evenly thin the kept frames down to at most this many.
    pub max_features: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dtg: DtgAggregate,
    /// Evaluate every `stride`-th case only.
    pub stride: usize,
    /// Stop after this many cases.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dtg: DtgAggregate::Mean,
            stride: 1,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gmm: GmmConfig,
    pub features: FeatureConfig,
    pub episode: EpisodeSpec,
    pub grid: GridParams,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Record provenance beside `artifact`.
    pub fn write_beside(&self, artifact: &Path) -> Result<()> {
        let path = sidecar(artifact, ".config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}

pub fn sidecar(artifact: &Path, suffix: &str) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{CorridorSpec, SceneSpec};
use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::estimators::{Backend, TrainConfig};
use crate::manifold::PoseNoise;
use crate::matching::OdometryOptions;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Isotropic pose-measurement noise (post-scaling units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNoiseSpec {
    pub sigma_rot: f64,
    pub sigma_trans: f64,
}

impl Default for PoseNoiseSpec {
    fn default() -> Self {
        PoseNoiseSpec { sigma_rot: 0.01, sigma_trans: 0.05 }
    }
}

impl PoseNoiseSpec {
    pub fn to_noise(&self) -> Result<PoseNoise> {
        PoseNoise::isotropic(self.sigma_rot, self.sigma_trans)
    }
}

/// File names written inside the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputNames {
    pub checkpoint: String,
    pub losses: String,
    pub covariances: String,
    pub diagnostics: String,
    pub trajectory: String,
    pub metrics: String,
    pub cloud: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        OutputNames {
            checkpoint: "checkpoint.json".into(),
            losses: "losses.csv".into(),
            covariances: "covariances.csv".into(),
            diagnostics: "diagnostics.json".into(),
            trajectory: "trajectory.txt".into(),
            metrics: "metrics.csv".into(),
            cloud: "augmented.xyz".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub scene: SceneSpec,
    pub corridor: CorridorSpec,
    pub backend: Backend,
    pub train: TrainConfig,
    pub pose_noise: PoseNoiseSpec,
    pub odometry: OdometryOptions,
    pub augment: AugmentSpec,
    pub pca_neighbors: usize,
    pub rpe_delta: usize,
    pub outputs: OutputNames,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            scene: SceneSpec::default(),
            corridor: CorridorSpec::default(),
            backend: Backend::Direct,
            train: TrainConfig::default(),
            pose_noise: PoseNoiseSpec::default(),
            odometry: OdometryOptions::default(),
            augment: AugmentSpec::default(),
            pca_neighbors: 24,
            rpe_delta: 5,
            outputs: OutputNames::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported config format version {}", self.format_version)));
        }
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.pose_noise.to_noise().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.augment.sigma_scale > 0.0) {
            return Err(Error::Config("augment.sigma_scale must be positive".into()));
        }
        if self.rpe_delta == 0 || self.pca_neighbors == 0 {
            return Err(Error::Config("rpe_delta and pca_neighbors must be positive".into()));
        }
        Ok(())
    }
}

//! JSON parameter checkpoints.
//!
//! Floats are written with the shortest decimal representation that
//! round-trips and parsed with correct rounding, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{MlpParams, DEC_HIDDEN, ENC_HIDDEN, ENC_OUT, OUT};
use super::train::{Backend, TrainConfig, TrainedParams};
use super::DirectParams;
use crate::error::{Error, Result};
use crate::manifold::LowerTri3;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backend: Backend,
    /// Layer widths for the network; `[points, 6]` for direct factors.
    pub architecture: Vec<usize>,
    pub parameters: Vec<f64>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(params: &TrainedParams, config: &TrainConfig) -> Self {
        let (architecture, parameters) = match params {
            TrainedParams::Direct(d) => (
                vec![d.factors.len(), 6],
                d.factors.iter().flat_map(|l| l.0).collect(),
            ),
            TrainedParams::Mlp(p) => (
                vec![3, ENC_HIDDEN, ENC_OUT, 2 * ENC_OUT, DEC_HIDDEN, OUT],
                p.to_flat(),
            ),
        };
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            backend: params.backend(),
            architecture,
            parameters,
            config: config.clone(),
        }
    }

    pub fn params(&self) -> Result<TrainedParams> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        match self.backend {
            Backend::Direct => {
                if self.architecture.len() != 2
                    || self.architecture[1] != 6
                    || self.parameters.len() != self.architecture[0] * 6
                {
                    return Err(Error::Config("direct checkpoint has inconsistent dimensions".into()));
                }
                Ok(TrainedParams::Direct(DirectParams {
                    factors: self
                        .parameters
                        .chunks_exact(6)
                        .map(|c| LowerTri3([c[0], c[1], c[2], c[3], c[4], c[5]]))
                        .collect(),
                }))
            }
            Backend::Mlp => {
                let expected = [3, ENC_HIDDEN, ENC_OUT, 2 * ENC_OUT, DEC_HIDDEN, OUT];
                if self.architecture != expected {
                    return Err(Error::Config(format!(
                        "network architecture {:?} does not match {:?}",
                        self.architecture, expected
                    )));
                }
                Ok(TrainedParams::Mlp(MlpParams::from_flat(&self.parameters)?))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

//! Versioned JSON checkpoints: canonical tensor path to shape and row-major data.
//!
//! Floats are printed in shortest round-trip form and parsed exactly, so a
//! save/load cycle is lossless.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CoreModelParams, ModelConfig};
use crate::dynamics::SpectralConfig;
use crate::error::{Error, Result};
use crate::learn::Mode;
use crate::spd::SpdMatrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: Mode,
    pub model: ModelConfig,
    pub spectral: SpectralConfig,
    /// Initial covariance for stateful inference.
    pub r0: Option<SpdMatrix>,
    /// Epoch the parameters were taken from.
    pub epoch: usize,
    /// Variance unit of the network output, m².
    #[serde(default = "unit_scale")]
    pub output_scale: f64,
    pub tensors: BTreeMap<String, Tensor>,
}

fn unit_scale() -> f64 {
    1.0
}

impl Checkpoint {
    pub fn new(
        mode: Mode,
        model: &ModelConfig,
        spectral: &SpectralConfig,
        params: &CoreModelParams,
        r0: Option<SpdMatrix>,
        epoch: usize,
    ) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|t| {
                (
                    t.name,
                    Tensor {
                        shape: t.shape,
                        data: t.data.to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode,
            model: model.clone(),
            spectral: spectral.clone(),
            r0,
            epoch,
            output_scale: 1.0,
            tensors,
        }
    }

    /// Rebuilds parameters, checking every tensor's presence and shape.
    pub fn params(&self) -> Result<CoreModelParams> {
        let mut params = CoreModelParams::init(&self.model, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if self.tensors.len() != expected.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
            if &t.shape != shape || t.data.len() != dst.len() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("tensor {name} has non-finite entries")));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("unreadable checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("unreadable checkpoint: {e}")))?;
        ckpt.model.validate()?;
        ckpt.spectral.validate()?;
        if !(ckpt.output_scale.is_finite() && ckpt.output_scale > 0.0) {
            return Err(Error::Config(format!("output_scale {} must be positive", ckpt.output_scale)));
        }
        Ok(ckpt)
    }

    /// The deployment objective these parameters were trained under.
    pub fn objective(&self, lambda_weight: f64) -> crate::learn::Objective {
        crate::learn::Objective {
            mode: self.mode,
            spectral: self.spectral.clone(),
            lambda_weight,
            init: crate::learn::InitialCondition::Stationary,
            scale: self.output_scale,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

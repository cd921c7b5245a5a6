//! Flat JSON checkpoint. Floats are printed in shortest round-trip form,
//! so save/load is bit-exact.

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ModelParams, NnError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
    /// Weights (row-major) then biases, layer by layer.
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_state: Option<AdamCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamCheckpoint {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hyper: AdamConfig,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, seed: u64, adam: Option<&AdamState>) -> Self {
        Self {
            layer_widths: params.layer_widths(),
            seed,
            params: params.flatten(),
            adam_state: adam.map(|s| AdamCheckpoint {
                m: s.m.flatten(),
                v: s.v.flatten(),
                step: s.step,
                hyper: s.hyper,
            }),
        }
    }

    pub fn model(&self) -> Result<ModelParams, NnError> {
        ModelParams::from_flat(&self.layer_widths, &self.params)
    }

    pub fn adam(&self) -> Result<Option<AdamState>, NnError> {
        self.adam_state
            .as_ref()
            .map(|a| {
                Ok(AdamState {
                    m: ModelParams::from_flat(&self.layer_widths, &a.m)?,
                    v: ModelParams::from_flat(&self.layer_widths, &a.v)?,
                    step: a.step,
                    hyper: a.hyper,
                })
            })
            .transpose()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let ck: Self = serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        ck.model()?;
        ck.adam()?;
        Ok(ck)
    }
}

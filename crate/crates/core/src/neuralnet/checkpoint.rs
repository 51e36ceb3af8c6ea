use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Activation, Layer, NetworkParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "statemix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    /// base64 of little-endian f64, row-major.
    weight: String,
    bias: String,
}

/// One network with the mixture shape its output encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub components: usize,
    pub state_dim: usize,
    pub dims: Vec<usize>,
    layers: Vec<LayerRecord>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {expected} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl NetworkRecord {
    pub fn from_params(params: &NetworkParams, components: usize, state_dim: usize) -> Self {
        let mut dims = vec![params.input_dim()];
        dims.extend(params.layers.iter().map(|l| l.outputs));
        NetworkRecord {
            components,
            state_dim,
            dims,
            layers: params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation,
                    weight: encode(&l.weight),
                    bias: encode(&l.bias),
                })
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<NetworkParams> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(Layer {
                    weight: decode(&r.weight, r.inputs * r.outputs, &format!("layer{} weight", i + 1))?,
                    bias: decode(&r.bias, r.outputs, &format!("layer{} bias", i + 1))?,
                    outputs: r.outputs,
                    inputs: r.inputs,
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = NetworkParams { layers };
        params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if params.output_dim() != 2 * self.components * self.state_dim {
            return Err(Error::Checkpoint(format!(
                "output width {} does not encode {} components of dimension {}",
                params.output_dim(),
                self.components,
                self.state_dim
            )));
        }
        Ok(params)
    }
}

/// Both networks of a learned model. The transition slot is empty for a
/// proposal-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub transition: Option<NetworkRecord>,
    pub proposal: Option<NetworkRecord>,
}

impl Checkpoint {
    pub fn new(state_dim: usize, obs_dim: usize, transition: Option<NetworkRecord>, proposal: Option<NetworkRecord>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            state_dim,
            obs_dim,
            transition,
            proposal,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        if let Some(t) = &ckpt.transition {
            if t.dims.first() != Some(&ckpt.state_dim) {
                return Err(Error::Checkpoint("transition input must equal the state dimension".into()));
            }
        }
        if let Some(p) = &ckpt.proposal {
            if p.dims.first() != Some(&(ckpt.state_dim + ckpt.obs_dim)) {
                return Err(Error::Checkpoint("proposal input must equal state plus observation dimension".into()));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

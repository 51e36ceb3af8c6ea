//! Dense feed-forward networks that emit Gaussian-mixture parameters.
//!
//! A network maps its conditioning input `z_0` through
//! `z_l = act_l(A_l z_{l-1} + b_l)` and the final layer has `2*S*d_x`
//! outputs laid out as `[mu_1, c_1, mu_2, c_2, ...]`, each block `d_x` long.
//! The transition network sees only the previous state, the proposal network
//! sees the previous state concatenated with the current observation.

mod adam;
mod checkpoint;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, NetworkRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::distributions::GaussianMixture;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub outputs: usize,
    pub inputs: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer widths plus what the output encodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
    pub state_dim: usize,
}

impl Architecture {
    /// Transition network: input is the previous state only.
    pub fn transition(state_dim: usize, hidden: &[usize], components: usize) -> Self {
        Architecture {
            input_dim: state_dim,
            hidden: hidden.to_vec(),
            components,
            state_dim,
        }
    }

    /// Proposal network: input is previous state and current observation.
    pub fn proposal(state_dim: usize, obs_dim: usize, hidden: &[usize], components: usize) -> Self {
        Architecture {
            input_dim: state_dim + obs_dim,
            hidden: hidden.to_vec(),
            components,
            state_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.components * self.state_dim
    }

    /// `[d_0, d_1, ..., d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim());
        dims
    }

    /// ReLU on hidden layers, identity on the output layer.
    pub fn activations(&self) -> Vec<Activation> {
        let mut acts = vec![Activation::Relu; self.hidden.len()];
        acts.push(Activation::Identity);
        acts
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    /// Entries drawn from `Uniform(-1/sqrt(d_{l-1}), 1/sqrt(d_{l-1}))`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "need at least two layer dims and one activation per layer, got {} dims and {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::Config(format!("layer dimensions must be positive, got {d}")));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = 1.0 / (inputs as f64).sqrt();
                let mut draw = || rng.random_range(-bound..bound);
                let weight = (0..inputs * outputs).map(|_| draw()).collect();
                let bias = (0..outputs).map(|_| draw()).collect();
                Layer {
                    weight,
                    bias,
                    outputs,
                    inputs,
                    activation,
                }
            })
            .collect();
        Ok(NetworkParams { layers })
    }

    pub fn for_architecture<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        Self::init(&arch.dims(), &arch.activations(), rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat tensors in `[A_1, b_1, A_2, b_2, ...]` order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| [format!("layer{}.weight", l + 1), format!("layer{}.bias", l + 1)])
            .collect()
    }

    /// Checks that consecutive layers chain.
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weight.len() != layer.inputs * layer.outputs || layer.bias.len() != layer.outputs {
                return Err(Error::shape(
                    "NetworkParams",
                    format!("layer {} of {}x{}", l + 1, layer.outputs, layer.inputs),
                    format!("{} weights, {} biases", layer.weight.len(), layer.bias.len()),
                ));
            }
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].inputs != pair[0].outputs {
                return Err(Error::shape("NetworkParams", pair[0].outputs, format!("layer {} input {}", l + 2, pair[1].inputs)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places the parameters on a tape. Trainable parameters become leaves,
    /// otherwise constants that never receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNetwork {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (
                        tape.leaf(l.weight.clone(), l.outputs, l.inputs),
                        tape.leaf(l.bias.clone(), 1, l.outputs),
                    )
                } else {
                    (
                        tape.constant(l.weight.clone(), l.outputs, l.inputs),
                        tape.constant(l.bias.clone(), 1, l.outputs),
                    )
                };
                (w, b, l.activation)
            })
            .collect();
        BoundNetwork { layers }
    }
}

/// Network parameters living on a tape.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundNetwork {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.0.cols())
    }

    /// Parameter vars in `[A_1, b_1, ...]` order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b, _)| [*w, *b]).collect()
    }

    /// Runs every row of `input` (`n x d_0`) through the network.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("network forward", self.input_dim(), input.cols()));
        }
        let mut z = input;
        for &(w, b, act) in &self.layers {
            let lin = tape.batch_matvec(w, z)?;
            let aff = tape.add_bias(lin, b)?;
            z = match act {
                Activation::Relu => tape.relu(aff),
                Activation::Identity => aff,
            };
        }
        Ok(z)
    }
}

/// Slices a network output (`n x 2*S*d`) into an equally weighted mixture.
pub fn make_mixture(tape: &mut Tape, output: Var, components: usize, dim: usize) -> Result<GaussianMixture> {
    if components == 0 || dim == 0 || output.cols() != 2 * components * dim {
        return Err(Error::shape("make_mixture", 2 * components * dim, output.cols()));
    }
    let n = output.rows();
    let width = output.cols();
    let block = |offset: usize| -> Vec<usize> {
        (0..n)
            .flat_map(|r| (0..components).flat_map(move |s| (0..dim).map(move |i| r * width + s * 2 * dim + offset + i)))
            .collect()
    };
    let means = tape.gather(output, block(0), n * components, dim)?;
    let scales = tape.gather(output, block(dim), n * components, dim)?;
    GaussianMixture::new(tape, means, scales, n, components)
}

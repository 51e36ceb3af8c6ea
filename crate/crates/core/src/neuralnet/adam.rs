use serde::{Deserialize, Serialize};

use super::NetworkParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Moment accumulators for one parameter set. Minimises: callers pass the
/// gradient of the loss (the negated objective when maximising).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One bias-corrected update. Nothing is modified when an error is returned.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Vec<f64>]) -> Result<()> {
        let names = params.tensor_names();
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::shape("adam_step", tensors.len(), grads.len()));
        }
        for ((t, g), name) in tensors.iter().zip(grads).zip(&names) {
            if t.len() != g.len() {
                return Err(Error::shape("adam_step", format!("{name} of {}", t.len()), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }

        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, t) in tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first[k], &mut self.second[k], &grads[k]);
            for i in 0..t.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clipping norm and whether clipping happened.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, bool) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let factor = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= factor);
        (norm, true)
    } else {
        (norm, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Activation, Layer};

    fn scalar_params(values: &[f64]) -> NetworkParams {
        NetworkParams {
            layers: vec![Layer {
                weight: values.to_vec(),
                bias: vec![0.0],
                outputs: 1,
                inputs: values.len(),
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.5, -3.0, 1e-3] {
            let mut p = scalar_params(&[1.0]);
            let mut adam = AdamState::new(&p, AdamConfig::with_learning_rate(0.01));
            adam.step(&mut p, &[vec![g], vec![0.0]]).unwrap();
            let moved = 1.0 - p.layers[0].weight[0];
            let expected = 0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-12);
            assert!((moved.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar_params(&[2.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.step(&mut p, &[vec![1.0], vec![0.0]]).unwrap();
        let before = p.clone();
        let (m0, v0) = (adam.first_moment()[0][0], adam.second_moment()[0][0]);
        adam.step(&mut p, &[vec![0.0], vec![0.0]]).unwrap();
        // m decays by beta1 but the bias-corrected update is still nonzero;
        // with a fresh state and zero gradient nothing moves at all.
        assert_eq!(adam.first_moment()[0][0], 0.9 * m0);
        assert_eq!(adam.second_moment()[0][0], 0.999 * v0);

        let mut fresh = AdamState::new(&before, AdamConfig::default());
        let mut q = before.clone();
        fresh.step(&mut q, &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(theta) = |theta|^2, |theta_0| = 1
        let mut p = scalar_params(&[0.6, -0.8]);
        let mut adam = AdamState::new(&p, AdamConfig::with_learning_rate(0.1));
        for _ in 0..200 {
            let g: Vec<f64> = p.layers[0].weight.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut p, &[g, vec![0.0]]).unwrap();
        }
        let norm = p.layers[0].weight.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "norm {norm}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_params(&[1.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let err = adam.step(&mut p, &[vec![0.0], vec![f64::NAN]]).unwrap_err();
        match err {
            Error::NonFiniteGradient { param } => assert_eq!(param, "layer1.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_params(&[1.0, 2.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        assert!(adam.step(&mut p, &[vec![0.0], vec![0.0]]).is_err());
        assert!(adam.step(&mut p, &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let (n, clipped) = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!(clipped);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let (_, clipped) = clip_global_norm(&mut g, 10.0);
        assert!(!clipped);
    }
}

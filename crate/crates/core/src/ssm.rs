//! State-space models and ground-truth simulation.
//!
//! Three systems are provided: stochastic Lorenz 96, the transformed
//! Kuramoto oscillator network (phases on the circle), and a scalar
//! linear-Gaussian model that has an exact Kalman filter for reference.
//! Observations are always the full state plus Gaussian noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::distributions::{wrap_angle, DiagGaussian, GaussianMixture, Topology};
use crate::error::{Error, Result};
use crate::rng;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz96Config {
    pub dim: usize,
    pub forcing: f64,
    pub dt: f64,
    /// Standard deviation of the state noise `v` (before the `sqrt(dt)` factor).
    pub sigma_v: f64,
    /// Standard deviation of the observation noise `r` (before `sqrt(dt)`).
    pub sigma_r: f64,
    /// Euler substeps of length `dt / substeps` for the drift over one
    /// observation interval; noise is added once per interval. A single
    /// explicit step of length 0.05 diverges within a few dozen steps.
    pub substeps: usize,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Lorenz96Config {
            dim: 20,
            forcing: 8.0,
            dt: 0.05,
            sigma_v: 0.5,
            sigma_r: 0.1f64.sqrt(),
            substeps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KuramotoConfig {
    pub dim: usize,
    pub coupling: f64,
    pub dt: f64,
    pub sigma_v: f64,
    pub sigma_r: f64,
    pub omega_mean: f64,
    pub omega_std: f64,
    /// Steps simulated before the first recorded state.
    pub burn_in: usize,
}

impl Default for KuramotoConfig {
    fn default() -> Self {
        KuramotoConfig {
            dim: 20,
            coupling: 0.8,
            dt: 0.05,
            sigma_v: 0.1,
            sigma_r: 0.005,
            omega_mean: 0.5,
            omega_std: 0.5,
            burn_in: 200,
        }
    }
}

/// `x_t = a x_{t-1} + N(0, q)`, `y_t = x_t + N(0, r)`, `x_0 ~ N(m0, p0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGaussianConfig {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl Default for LinearGaussianConfig {
    fn default() -> Self {
        LinearGaussianConfig {
            a: 0.9,
            q: 0.5,
            r: 0.5,
            m0: 0.0,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum ModelConfig {
    Lorenz96(Lorenz96Config),
    Kuramoto(KuramotoConfig),
    LinearGaussian(LinearGaussianConfig),
}

impl ModelConfig {
    pub fn descriptor(&self) -> &'static str {
        match self {
            ModelConfig::Lorenz96(_) => "lorenz96",
            ModelConfig::Kuramoto(_) => "kuramoto",
            ModelConfig::LinearGaussian(_) => "linear_gaussian",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ModelConfig::Lorenz96(c) => c.dim,
            ModelConfig::Kuramoto(c) => c.dim,
            ModelConfig::LinearGaussian(_) => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        match self {
            ModelConfig::Lorenz96(c) => {
                if c.dim < 4 {
                    return Err(Error::Config(format!("Lorenz 96 needs at least 4 dimensions, got {}", c.dim)));
                }
                if c.substeps == 0 {
                    return Err(Error::Config("Lorenz 96 needs at least one substep".into()));
                }
                nonneg("dt", c.dt)?;
                nonneg("sigma_v", c.sigma_v)?;
                nonneg("sigma_r", c.sigma_r)
            }
            ModelConfig::Kuramoto(c) => {
                if c.dim == 0 {
                    return Err(Error::Config("Kuramoto needs at least one oscillator".into()));
                }
                nonneg("dt", c.dt)?;
                nonneg("sigma_v", c.sigma_v)?;
                nonneg("sigma_r", c.sigma_r)?;
                nonneg("omega_std", c.omega_std)
            }
            ModelConfig::LinearGaussian(c) => {
                nonneg("q", c.q)?;
                nonneg("r", c.r)?;
                nonneg("p0", c.p0)
            }
        }
    }
}

/// One Euler-Maruyama step of Lorenz 96 with cyclic indices. `v` is the raw
/// state-noise draw; it enters scaled by `sqrt(dt)`.
pub fn lorenz96_step(x: &[f64], forcing: f64, dt: f64, v: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 4 {
        return Err(Error::contract("lorenz96_step", format!("needs at least 4 dimensions, got {d}")));
    }
    if v.len() != d {
        return Err(Error::shape("lorenz96_step", d, v.len()));
    }
    let sq = dt.sqrt();
    Ok((0..d)
        .map(|i| lorenz96_mean(x, i, forcing, dt) + sq * v[i])
        .collect())
}

fn lorenz96_mean(x: &[f64], i: usize, forcing: f64, dt: f64) -> f64 {
    let d = x.len();
    let (m1, p1, m2) = ((i + d - 1) % d, (i + 1) % d, (i + d - 2) % d);
    x[i] + ((x[m1] * (x[p1] - x[m2]) - x[i]) + forcing) * dt
}

/// Order parameter `R e^{i phi}`, the mean of the unit phasors. `phi` is 0
/// when `R` is exactly 0.
pub fn kuramoto_order_params(theta: &[f64]) -> (f64, f64) {
    if theta.is_empty() {
        return (0.0, 0.0);
    }
    let n = theta.len() as f64;
    let re = theta.iter().map(|t| t.cos()).sum::<f64>() / n;
    let im = theta.iter().map(|t| t.sin()).sum::<f64>() / n;
    let r = re.hypot(im);
    if r == 0.0 {
        (0.0, 0.0)
    } else {
        (r, im.atan2(re))
    }
}

/// One Euler-Maruyama step of the Kuramoto network. Phases are not wrapped.
pub fn kuramoto_step(x: &[f64], omega: &[f64], coupling: f64, dt: f64, v: &[f64]) -> Result<Vec<f64>> {
    if omega.len() != x.len() || v.len() != x.len() {
        return Err(Error::shape("kuramoto_step", x.len(), format!("omega {} / noise {}", omega.len(), v.len())));
    }
    let (r, phi) = kuramoto_order_params(x);
    let sq = dt.sqrt();
    Ok(x.iter()
        .zip(omega)
        .zip(v)
        .map(|((xi, wi), vi)| xi + dt * (wi + coupling * r * (phi - xi).sin()) + sq * vi)
        .collect())
}

fn diag_logpdf(x: &[f64], mean: &[f64], std: f64, topology: Topology) -> f64 {
    let quad: f64 = x
        .iter()
        .zip(mean)
        .map(|(a, m)| {
            let z = topology.canonicalize_value(a - m) / std;
            z * z
        })
        .sum();
    let d = x.len() as f64;
    -0.5 * quad - d * std.ln() - d * HALF_LN_TAU
}

/// A configured model instance. Kuramoto natural frequencies are drawn once
/// from the experiment seed and then held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    config: ModelConfig,
    omega: Vec<f64>,
}

impl StateSpaceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let omega = match &config {
            ModelConfig::Kuramoto(c) => {
                let normal = Normal::new(c.omega_mean, c.omega_std).map_err(|e| Error::Config(e.to_string()))?;
                let mut r = rng::stream(seed, &[rng::label("omega")]);
                (0..c.dim).map(|_| r.sample(normal)).collect()
            }
            _ => Vec::new(),
        };
        Ok(StateSpaceModel { config, omega })
    }

    pub fn with_omega(config: ModelConfig, omega: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = match &config {
            ModelConfig::Kuramoto(c) => c.dim,
            _ => 0,
        };
        if omega.len() != expected {
            return Err(Error::shape("StateSpaceModel::with_omega", expected, omega.len()));
        }
        Ok(StateSpaceModel { config, omega })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim()
    }

    pub fn topology(&self) -> Topology {
        match self.config {
            ModelConfig::Kuramoto(_) => Topology::Circular,
            _ => Topology::Euclidean,
        }
    }

    pub fn burn_in(&self) -> usize {
        match &self.config {
            ModelConfig::Kuramoto(c) => c.burn_in,
            _ => 0,
        }
    }

    /// Per-coordinate standard deviation of the transition noise.
    pub fn transition_std(&self) -> f64 {
        match &self.config {
            ModelConfig::Lorenz96(c) => c.dt.sqrt() * c.sigma_v,
            ModelConfig::Kuramoto(c) => c.dt.sqrt() * c.sigma_v,
            ModelConfig::LinearGaussian(c) => c.q.sqrt(),
        }
    }

    /// Per-coordinate standard deviation of the observation noise.
    pub fn observation_std(&self) -> f64 {
        match &self.config {
            ModelConfig::Lorenz96(c) => c.dt.sqrt() * c.sigma_r,
            ModelConfig::Kuramoto(c) => c.dt.sqrt() * c.sigma_r,
            ModelConfig::LinearGaussian(c) => c.r.sqrt(),
        }
    }

    /// Mean of `f(. | x)` before wrapping.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        match &self.config {
            ModelConfig::Lorenz96(c) => {
                let h = c.dt / c.substeps as f64;
                let mut z = x.to_vec();
                for _ in 0..c.substeps {
                    z = (0..z.len()).map(|i| lorenz96_mean(&z, i, c.forcing, h)).collect();
                }
                z
            }
            ModelConfig::Kuramoto(c) => {
                let n = x.len() as f64;
                let cbar = x.iter().map(|v| v.cos()).sum::<f64>() / n;
                let sbar = x.iter().map(|v| v.sin()).sum::<f64>() / n;
                x.iter()
                    .zip(&self.omega)
                    .map(|(xi, wi)| {
                        let pull = sbar * xi.cos() - cbar * xi.sin();
                        xi + (pull * c.coupling + wi) * c.dt
                    })
                    .collect()
            }
            ModelConfig::LinearGaussian(c) => x.iter().map(|v| c.a * v).collect(),
        }
    }

    pub fn initial_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.config {
            ModelConfig::Lorenz96(c) => {
                let mut x = vec![0.0; c.dim];
                x[0] = 1.0;
                x
            }
            ModelConfig::Kuramoto(c) => (0..c.dim).map(|_| rng.random_range(-PI..PI)).collect(),
            ModelConfig::LinearGaussian(c) => {
                let e: f64 = rng.sample(StandardNormal);
                vec![c.m0 + c.p0.sqrt() * e]
            }
        }
    }

    pub fn transition_sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let std = self.transition_std();
        let top = self.topology();
        self.drift(x)
            .into_iter()
            .map(|m| {
                let e: f64 = rng.sample(StandardNormal);
                top.canonicalize_value(m + std * e)
            })
            .collect()
    }

    pub fn transition_logpdf(&self, x: &[f64], x_prev: &[f64]) -> f64 {
        diag_logpdf(x, &self.drift(x_prev), self.transition_std(), self.topology())
    }

    pub fn observation_sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let std = self.observation_std();
        let top = self.topology();
        x.iter()
            .map(|m| {
                let e: f64 = rng.sample(StandardNormal);
                top.canonicalize_value(m + std * e)
            })
            .collect()
    }

    pub fn observation_logpdf(&self, y: &[f64], x: &[f64]) -> f64 {
        diag_logpdf(y, x, self.observation_std(), self.topology())
    }

    /// Transition mean for every row of `x_prev` (`n x d`), on the tape.
    pub fn drift_tape(&self, tape: &mut Tape, x_prev: Var) -> Result<Var> {
        let (n, d) = x_prev.shape();
        if d != self.state_dim() {
            return Err(Error::shape("drift_tape", self.state_dim(), d));
        }
        match &self.config {
            ModelConfig::Lorenz96(c) => {
                let h = c.dt / c.substeps as f64;
                let mut z = x_prev;
                for _ in 0..c.substeps {
                    z = lorenz96_euler_tape(tape, z, c.forcing, h)?;
                }
                Ok(z)
            }
            ModelConfig::Kuramoto(c) => {
                let cos = tape.cos(x_prev);
                let sin = tape.sin(x_prev);
                let csum = tape.sum_rows(cos);
                let ssum = tape.sum_rows(sin);
                let cbar = tape.scale(csum, 1.0 / d as f64);
                let sbar = tape.scale(ssum, 1.0 / d as f64);
                let bcast: Vec<usize> = (0..n).flat_map(|r| std::iter::repeat_n(r, d)).collect();
                let cbar = tape.gather(cbar, bcast.clone(), n, d)?;
                let sbar = tape.gather(sbar, bcast, n, d)?;
                let a = tape.mul(sbar, cos)?;
                let b = tape.mul(cbar, sin)?;
                let pull = tape.sub(a, b)?;
                let pull = tape.scale(pull, c.coupling);
                let omega: Vec<f64> = (0..n).flat_map(|_| self.omega.iter().copied()).collect();
                let rate = tape.add_const(pull, &omega)?;
                let step = tape.scale(rate, c.dt);
                tape.add(x_prev, step)
            }
            ModelConfig::LinearGaussian(c) => Ok(tape.scale(x_prev, c.a)),
        }
    }

    /// The true transition kernel as a one-component mixture per row.
    pub fn transition_mixture(&self, tape: &mut Tape, x_prev: Var) -> Result<GaussianMixture> {
        let mean = self.drift_tape(tape, x_prev)?;
        let scale = tape.constant(vec![self.transition_std(); mean.len()], mean.rows(), mean.cols());
        Ok(GaussianMixture::new(tape, mean, scale, mean.rows(), 1)?.with_topology(self.topology()))
    }

    /// `log g(y | x_k)` for each row of `x` (`n x d`), returned as `n x 1`.
    pub fn observation_log_density(&self, tape: &mut Tape, x: Var, y: &[f64]) -> Result<Var> {
        let (n, d) = x.shape();
        if y.len() != self.obs_dim() || d != self.state_dim() {
            return Err(Error::shape("observation_log_density", self.obs_dim(), format!("x {d} / y {}", y.len())));
        }
        let scale = tape.constant(vec![self.observation_std(); n * d], n, d);
        let g = DiagGaussian::new(tape, x, scale)?.with_topology(self.topology());
        let ys = tape.constant(y.repeat(n), n, d);
        g.log_density(tape, ys)
    }
}

fn lorenz96_euler_tape(tape: &mut Tape, x: Var, forcing: f64, h: f64) -> Result<Var> {
    let (n, d) = x.shape();
    let shifted = |tape: &mut Tape, k: usize| {
        let idx = (0..n).flat_map(|r| (0..d).map(move |i| r * d + (i + k) % d)).collect();
        tape.gather(x, idx, n, d)
    };
    let m1 = shifted(tape, d - 1)?;
    let p1 = shifted(tape, 1)?;
    let m2 = shifted(tape, d - 2)?;
    let diff = tape.sub(p1, m2)?;
    let adv = tape.mul(m1, diff)?;
    let inner = tape.sub(adv, x)?;
    let inner = tape.add_scalar(inner, forcing);
    let step = tape.scale(inner, h);
    tape.add(x, step)
}

/// Hidden states `x_{0:T}` and observations `y_{1:T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub model: ModelConfig,
    pub omega: Vec<f64>,
    pub seed: u64,
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    omega: Vec<f64>,
    seed: u64,
    steps: usize,
}

/// Simulates `T` observed steps after the model's burn-in. Randomness comes
/// from substreams keyed by `seed` and the time index.
pub fn simulate(model: &StateSpaceModel, steps: usize, seed: u64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("trajectory length must be at least 1".into()));
    }
    let tag = rng::label("simulate");
    let mut x = model.initial_sample(&mut rng::stream(seed, &[tag, u64::MAX]));
    for b in 0..model.burn_in() {
        x = model.transition_sample(&x, &mut rng::stream(seed, &[tag, u64::MAX - 1, b as u64]));
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(x.clone());
    for t in 1..=steps {
        let mut r = rng::stream(seed, &[tag, t as u64]);
        x = model.transition_sample(&x, &mut r);
        observations.push(model.observation_sample(&x, &mut r));
        states.push(x.clone());
    }
    Ok(Trajectory {
        model: model.config().clone(),
        omega: model.omega().to_vec(),
        seed,
        states,
        observations,
    })
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn model(&self) -> Result<StateSpaceModel> {
        StateSpaceModel::with_omega(self.model.clone(), self.omega.clone())
    }

    /// Hex SHA-256 of the observation bits; identifies a series in pairings.
    pub fn series_hash(&self) -> String {
        let mut h = Sha256::new();
        for y in &self.observations {
            for v in y {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First `len` observations with their states.
    pub fn prefix(&self, len: usize) -> Trajectory {
        let len = len.min(self.len());
        Trajectory {
            states: self.states[..=len].to_vec(),
            observations: self.observations[..len].to_vec(),
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let dx = self.states.first().map_or(0, Vec::len);
        let dy = self.observations.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=dx).map(|i| format!("x_{i}")));
        header.extend((1..=dy).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match t.checked_sub(1).and_then(|i| self.observations.get(i)) {
                Some(y) => row.extend(y.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), dy)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(&csv_path)?;
        let sidecar = Sidecar {
            model: self.model.clone(),
            omega: self.omega.clone(),
            seed: self.seed,
            steps: self.len(),
        };
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok((csv_path, json_path))
    }

    /// Reads a trajectory back from its CSV and sidecar.
    pub fn load(csv_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let dx = sidecar.model.state_dim();
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut states = Vec::new();
        let mut observations = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 1 + 2 * dx {
                return Err(Error::shape("Trajectory::load", 1 + 2 * dx, rec.len()));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}")));
            states.push(rec.iter().skip(1).take(dx).map(parse).collect::<Result<Vec<_>>>()?);
            if states.len() > 1 {
                observations.push(rec.iter().skip(1 + dx).map(parse).collect::<Result<Vec<_>>>()?);
            }
        }
        if observations.len() != sidecar.steps {
            return Err(Error::shape("Trajectory::load", sidecar.steps, observations.len()));
        }
        Ok(Trajectory {
            model: sidecar.model,
            omega: sidecar.omega,
            seed: sidecar.seed,
            states,
            observations,
        })
    }
}

/// Exact filtering means and variances for the scalar linear-Gaussian model.
pub fn kalman_filter(c: &LinearGaussianConfig, ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut m, mut p) = (c.m0, c.p0);
    let mut means = Vec::with_capacity(ys.len());
    let mut vars = Vec::with_capacity(ys.len());
    for &y in ys {
        m *= c.a;
        p = c.a * c.a * p + c.q;
        let gain = p / (p + c.r);
        m += gain * (y - m);
        p *= 1.0 - gain;
        means.push(m);
        vars.push(p);
    }
    (means, vars)
}

/// Wraps every coordinate into `[-pi, pi)`.
pub fn wrap_all(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = wrap_angle(*v));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lorenz(dim: usize) -> StateSpaceModel {
        StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim, ..Default::default() }), 1).unwrap()
    }

    fn kuramoto(dim: usize) -> StateSpaceModel {
        StateSpaceModel::new(ModelConfig::Kuramoto(KuramotoConfig { dim, ..Default::default() }), 3).unwrap()
    }

    #[test]
    fn lorenz_fixed_point() {
        let x = vec![8.0; 6];
        assert_eq!(lorenz96_step(&x, 8.0, 0.05, &[0.0; 6]).unwrap(), x);
    }

    #[test]
    fn lorenz_hand_computed_step() {
        let out = lorenz96_step(&[1.0, 0.0, 0.0, 0.0, 0.0], 8.0, 0.05, &[0.0; 5]).unwrap();
        let expected = [1.35, 0.4, 0.4, 0.4, 0.4];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{out:?}");
        }
    }

    #[test]
    fn lorenz_rejects_small_dims() {
        assert!(lorenz96_step(&[0.0; 3], 8.0, 0.05, &[0.0; 3]).is_err());
        assert!(StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 3, ..Default::default() }), 0).is_err());
    }

    #[test]
    fn order_params_examples() {
        let (r, phi) = kuramoto_order_params(&[0.7; 4]);
        assert!((r - 1.0).abs() < 1e-15 && (phi - 0.7).abs() < 1e-15);
        let (r, _) = kuramoto_order_params(&[0.0, PI]);
        assert!(r < 1e-15);
    }

    #[test]
    fn kuramoto_synchronised_fixed_point() {
        let x = vec![1.1; 5];
        let out = kuramoto_step(&x, &[0.0; 5], 0.8, 0.05, &[0.0; 5]).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn kuramoto_decoupled_limit() {
        let out = kuramoto_step(&[0.0, PI], &[0.3, -0.2], 0.8, 0.05, &[0.0; 2]).unwrap();
        assert!((out[0] - 0.015).abs() < 1e-15);
        assert!((out[1] - (PI - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn kuramoto_drift_matches_step() {
        let m = kuramoto(7);
        let x: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).sin() * 3.0).collect();
        let step = kuramoto_step(&x, m.omega(), 0.8, 0.05, &[0.0; 7]).unwrap();
        for (a, b) in step.iter().zip(m.drift(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_drift_matches_plain_drift() {
        for m in [lorenz(6), kuramoto(4), StateSpaceModel::new(ModelConfig::LinearGaussian(Default::default()), 0).unwrap()] {
            let d = m.state_dim();
            let rows: Vec<Vec<f64>> = (0..3).map(|r| (0..d).map(|i| ((r * 7 + i) as f64).cos() * 2.0).collect()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(rows.concat(), 3, d);
            let mean = m.drift_tape(&mut tape, x).unwrap();
            let want: Vec<f64> = rows.iter().flat_map(|r| m.drift(r)).collect();
            for (a, b) in tape.value(mean).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{} {a} {b}", m.config().descriptor());
            }
        }
    }

    #[test]
    fn tape_densities_match_plain_densities() {
        for m in [lorenz(5), kuramoto(5)] {
            let mut r = rng::stream(2, &[]);
            let xp = m.initial_sample(&mut r);
            let x = m.transition_sample(&xp, &mut r);
            let y = m.observation_sample(&x, &mut r);
            let mut tape = Tape::new();
            let xpv = tape.constant(xp.clone(), 1, 5);
            let xv = tape.constant(x.clone(), 1, 5);
            let f = m.transition_mixture(&mut tape, xpv).unwrap();
            let lf = f.log_density(&mut tape, xv).unwrap();
            let lg = m.observation_log_density(&mut tape, xv, &y).unwrap();
            assert!((tape.scalar(lf) - m.transition_logpdf(&x, &xp)).abs() < 1e-10);
            assert!((tape.scalar(lg) - m.observation_logpdf(&y, &x)).abs() < 1e-10);
        }
    }

    #[test]
    fn drift_composes_literal_euler_substeps() {
        let x = vec![1.5, -0.3, 2.0, 0.7, -1.1];
        let zero = vec![0.0; 5];
        let one = StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 5, substeps: 1, ..Default::default() }), 0).unwrap();
        assert_eq!(one.drift(&x), lorenz96_step(&x, 8.0, 0.05, &zero).unwrap());
        let ten = StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 5, ..Default::default() }), 0).unwrap();
        let mut z = x.clone();
        for _ in 0..10 {
            z = lorenz96_step(&z, 8.0, 0.005, &zero).unwrap();
        }
        for (a, b) in ten.drift(&x).iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { substeps: 0, ..Default::default() }), 0).is_err());
    }

    #[test]
    fn zero_noise_observes_state_exactly() {
        let cfg = Lorenz96Config {
            dim: 5,
            sigma_v: 0.0,
            sigma_r: 0.0,
            ..Default::default()
        };
        let m = StateSpaceModel::new(ModelConfig::Lorenz96(cfg), 0).unwrap();
        let tr = simulate(&m, 20, 4).unwrap();
        for t in 0..20 {
            assert_eq!(tr.observations[t], tr.states[t + 1]);
        }
    }

    #[test]
    fn simulate_is_reproducible_and_sized() {
        let m = kuramoto(5);
        let a = simulate(&m, 12, 9).unwrap();
        let b = simulate(&m, 12, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 13);
        assert_eq!(a.observations.len(), 12);
        assert!(a.states.iter().flatten().all(|v| (-PI..PI).contains(v)));
        assert_ne!(a.series_hash(), simulate(&m, 12, 10).unwrap().series_hash());
    }

    #[test]
    fn lorenz_starts_at_first_basis_vector() {
        let tr = simulate(&lorenz(5), 3, 0).unwrap();
        assert_eq!(tr.states[0], vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn omega_is_fixed_per_seed() {
        assert_eq!(kuramoto(5).omega(), kuramoto(5).omega());
        let other = StateSpaceModel::new(ModelConfig::Kuramoto(KuramotoConfig { dim: 5, ..Default::default() }), 4).unwrap();
        assert_ne!(kuramoto(5).omega(), other.omega());
    }

    #[test]
    fn trajectory_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tr = simulate(&kuramoto(3), 5, 1).unwrap();
        let (c, j) = tr.save(dir.path(), "series").unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.starts_with("t,x_1,x_2,x_3,y_1,y_2,y_3\n0,"));
        assert!(text.lines().nth(1).unwrap().ends_with(",,,"));
        assert_eq!(Trajectory::load(&c, &j).unwrap(), tr);
    }

    #[test]
    fn kalman_single_step() {
        let c = LinearGaussianConfig::default();
        let (m, p) = kalman_filter(&c, &[1.0]);
        let prior = 0.81 + 0.5;
        let gain = prior / (prior + 0.5);
        assert!((m[0] - gain).abs() < 1e-15);
        assert!((p[0] - (1.0 - gain) * prior).abs() < 1e-15);
    }
}

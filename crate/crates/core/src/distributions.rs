//! Diagonal Gaussians and equally weighted Gaussian mixtures on the tape.
//!
//! All distributions are batched: a batch of `n` conditional distributions
//! (one per particle) is evaluated or sampled in a single set of tape nodes.
//! A mixture with `S` components stores its means and scales as
//! `(n*S) x d` arrays, component `s` of row `r` at row `r*S + s`.
//!
//! Scales are the raw covariance-scale vectors `c`; the covariance is
//! `diag(c)^2`, so only `|c|` matters. Every scale is floored at
//! [`SCALE_FLOOR`] before use.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const SCALE_FLOOR: f64 = 1e-3;
pub const GUMBEL_TEMPERATURE: f64 = 0.5;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

/// Geometry of the state space. Circular coordinates live in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Euclidean,
    Circular,
}

/// Maps an angle into `[-pi, pi)`.
pub fn wrap_angle(v: f64) -> f64 {
    let w = v - TAU * ((v + PI) / TAU).floor();
    // guard the rounding edge where w lands exactly on +pi
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

impl Topology {
    /// Re-expresses `v` in canonical coordinates, with identity derivative.
    pub fn canonicalize(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Topology::Euclidean => Ok(v),
            Topology::Circular => {
                let offset: Vec<f64> = tape.value(v).iter().map(|x| wrap_angle(*x) - x).collect();
                if offset.iter().all(|o| *o == 0.0) {
                    return Ok(v);
                }
                tape.add_const(v, &offset)
            }
        }
    }

    pub fn canonicalize_value(self, v: f64) -> f64 {
        match self {
            Topology::Euclidean => v,
            Topology::Circular => wrap_angle(v),
        }
    }
}

/// How a mixture component is chosen when sampling.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Plain categorical draw on stopped weights.
    #[default]
    StopGradient,
    /// Straight-through Gumbel-softmax: hard selection forward, soft gradient.
    GumbelSoftmax { temperature: f64 },
}

impl Sampler {
    pub fn gumbel() -> Self {
        Sampler::GumbelSoftmax {
            temperature: GUMBEL_TEMPERATURE,
        }
    }
}

/// Externally supplied randomness for one batch of mixture draws.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDraws {
    /// One uniform per row (stop-gradient) or per row and component (Gumbel).
    pub uniforms: Vec<f64>,
    /// Standard normals, `n x d`.
    pub normals: Vec<f64>,
}

impl MixtureDraws {
    pub fn generate<R: Rng + ?Sized>(
        rng: &mut R,
        rows: usize,
        components: usize,
        dim: usize,
        sampler: Sampler,
    ) -> Self {
        let n_unif = match sampler {
            Sampler::StopGradient => rows,
            Sampler::GumbelSoftmax { .. } => rows * components,
        };
        let uniforms = (0..n_unif).map(|_| rng.random::<f64>()).collect();
        let normals = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
        MixtureDraws { uniforms, normals }
    }
}

/// Batch of `n` diagonal Gaussians in `d` dimensions.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    mean: Var,
    scale: Var,
    topology: Topology,
}

fn floor_scales(tape: &mut Tape, raw: Var) -> Var {
    let a = tape.abs(raw);
    tape.clamp_min(a, SCALE_FLOOR)
}

impl DiagGaussian {
    /// `mean` and `raw_scale` are both `n x d`.
    pub fn new(tape: &mut Tape, mean: Var, raw_scale: Var) -> Result<Self> {
        if mean.shape() != raw_scale.shape() {
            return Err(Error::shape(
                "DiagGaussian::new",
                format!("{:?}", mean.shape()),
                format!("{:?}", raw_scale.shape()),
            ));
        }
        let scale = floor_scales(tape, raw_scale);
        Ok(DiagGaussian {
            mean,
            scale,
            topology: Topology::Euclidean,
        })
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self
    }

    pub fn mean(&self) -> Var {
        self.mean
    }

    /// Effective (floored) scales.
    pub fn scale(&self) -> Var {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// Per-row log-density of `x` (`n x d`), returned as `n x 1`.
    pub fn log_density(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape(
                "log_density_gaussian",
                format!("{:?}", self.mean.shape()),
                format!("{:?}", x.shape()),
            ));
        }
        gaussian_rows(tape, x, self.mean, self.scale, self.topology)
    }
}

// Log-density per row of equally shaped x, mean, scale arrays.
fn gaussian_rows(tape: &mut Tape, x: Var, mean: Var, scale: Var, topology: Topology) -> Result<Var> {
    let d = mean.cols() as f64;
    let diff = tape.sub(x, mean)?;
    let diff = topology.canonicalize(tape, diff)?;
    let z = tape.div(diff, scale)?;
    let z2 = tape.square(z);
    let quad = tape.sum_rows(z2);
    let log_scale = tape.log(scale);
    let log_det = tape.sum_rows(log_scale);
    let half_quad = tape.scale(quad, -0.5);
    let out = tape.sub(half_quad, log_det)?;
    Ok(tape.add_scalar(out, -d * HALF_LN_TAU))
}

/// Batch of `n` equally weighted mixtures of `S` diagonal Gaussians.
#[derive(Debug, Clone, Copy)]
pub struct GaussianMixture {
    means: Var,
    scales: Var,
    rows: usize,
    components: usize,
    dim: usize,
    topology: Topology,
}

impl GaussianMixture {
    /// `means` and `raw_scales` are `(rows*components) x dim`.
    pub fn new(
        tape: &mut Tape,
        means: Var,
        raw_scales: Var,
        rows: usize,
        components: usize,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::contract("GaussianMixture::new", "at least one component required"));
        }
        if means.shape() != raw_scales.shape() || means.rows() != rows * components {
            return Err(Error::shape(
                "GaussianMixture::new",
                format!("{}x{}", rows * components, means.cols()),
                format!("means {:?}, scales {:?}", means.shape(), raw_scales.shape()),
            ));
        }
        let scales = floor_scales(tape, raw_scales);
        Ok(GaussianMixture {
            means,
            scales,
            rows,
            components,
            dim: means.cols(),
            topology: Topology::Euclidean,
        })
    }

    /// Single-component mixture from one Gaussian batch.
    pub fn from_gaussian(g: DiagGaussian) -> Self {
        GaussianMixture {
            means: g.mean,
            scales: g.scale,
            rows: g.mean.rows(),
            components: 1,
            dim: g.mean.cols(),
            topology: g.topology,
        }
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn means(&self) -> Var {
        self.means
    }

    pub fn scales(&self) -> Var {
        self.scales
    }

    /// `logsumexp_s log N_s(x) - log S`, per row, as `rows x 1`.
    pub fn log_density(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if x.shape() != (self.rows, self.dim) {
            return Err(Error::shape(
                "log_density_mixture",
                format!("{}x{}", self.rows, self.dim),
                format!("{:?}", x.shape()),
            ));
        }
        let s = self.components;
        let repeated = if s == 1 {
            x
        } else {
            let rows: Vec<usize> = (0..self.rows).flat_map(|r| std::iter::repeat_n(r, s)).collect();
            tape.gather_rows(x, &rows)?
        };
        let per_comp = gaussian_rows(tape, repeated, self.means, self.scales, self.topology)?;
        if s == 1 {
            return Ok(per_comp);
        }
        let grid = tape.reshape(per_comp, self.rows, s)?;
        let lse = tape.logsumexp_rows(grid)?;
        Ok(tape.add_scalar(lse, -(s as f64).ln()))
    }

    fn check_draws(&self, draws: &MixtureDraws, n_unif: usize) -> Result<()> {
        if draws.normals.len() != self.rows * self.dim || draws.uniforms.len() != n_unif {
            return Err(Error::shape(
                "sample_mixture",
                format!("{} uniforms, {} normals", n_unif, self.rows * self.dim),
                format!("{} uniforms, {} normals", draws.uniforms.len(), draws.normals.len()),
            ));
        }
        Ok(())
    }

    /// Component chosen by a categorical draw on the (stopped, equal)
    /// weights; the returned point is `mu_sel + c_sel * eps`.
    pub fn sample_stopgrad(&self, tape: &mut Tape, draws: &MixtureDraws) -> Result<Var> {
        self.check_draws(draws, self.rows)?;
        let s = self.components;
        let chosen: Vec<usize> = draws
            .uniforms
            .iter()
            .enumerate()
            .map(|(r, u)| r * s + ((u * s as f64) as usize).min(s - 1))
            .collect();
        let (mu, c) = if s == 1 {
            (self.means, self.scales)
        } else {
            (
                tape.gather_rows(self.means, &chosen)?,
                tape.gather_rows(self.scales, &chosen)?,
            )
        };
        let eps = tape.constant(draws.normals.clone(), self.rows, self.dim);
        let noise = tape.mul(c, eps)?;
        let x = tape.add(mu, noise)?;
        self.topology.canonicalize(tape, x)
    }

    /// Straight-through Gumbel-softmax selection over logits `log(1/S)`.
    pub fn sample_reparam(&self, tape: &mut Tape, draws: &MixtureDraws, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::contract(
                "sample_mixture_reparam",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let (n, s, d) = (self.rows, self.components, self.dim);
        self.check_draws(draws, n * s)?;

        let log_w = -(s as f64).ln();
        let perturbed: Vec<f64> = draws
            .uniforms
            .iter()
            .map(|u| {
                let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                (log_w - (-u.ln()).ln()) / temperature
            })
            .collect();
        let mut hard = vec![0.0; n * s];
        for r in 0..n {
            let row = &perturbed[r * s..(r + 1) * s];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            hard[r * s + best] = 1.0;
        }
        let logits = tape.constant(perturbed, n, s);
        let soft = tape.softmax_rows(logits)?;
        let hard = tape.constant(hard, n, s);
        let gap = tape.sub(hard, soft)?;
        let gap = tape.stop_gradient(gap);
        let select = tape.add(soft, gap)?;

        // every component's reparametrised point, (n*S) x d
        let eps_rows: Vec<usize> = (0..n).flat_map(|r| std::iter::repeat_n(r, s)).collect();
        let eps = tape.constant(draws.normals.clone(), n, d);
        let eps = tape.gather_rows(eps, &eps_rows)?;
        let noise = tape.mul(self.scales, eps)?;
        let points = tape.add(self.means, noise)?;

        // weight each point by its selection coefficient, then sum over s
        let sel_index: Vec<usize> = (0..n * s).flat_map(|i| std::iter::repeat_n(i, d)).collect();
        let sel = tape.gather(select, sel_index, n * s, d)?;
        let weighted = tape.mul(points, sel)?;
        let by_comp: Vec<usize> = (0..n)
            .flat_map(|r| (0..d).flat_map(move |i| (0..s).map(move |k| (r * s + k) * d + i)))
            .collect();
        let regrouped = tape.gather(weighted, by_comp, n * d, s)?;
        let summed = tape.sum_rows(regrouped);
        let x = tape.reshape(summed, n, d)?;
        self.topology.canonicalize(tape, x)
    }

    pub fn sample(&self, tape: &mut Tape, draws: &MixtureDraws, sampler: Sampler) -> Result<Var> {
        match sampler {
            Sampler::StopGradient => self.sample_stopgrad(tape, draws),
            Sampler::GumbelSoftmax { temperature } => self.sample_reparam(tape, draws, temperature),
        }
    }
}

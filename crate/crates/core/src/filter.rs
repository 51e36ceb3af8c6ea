//! Sequential importance resampling with an optional differentiable
//! resampling transform.
//!
//! Resampling happens at every step with independent multinomial ancestor
//! draws. In differentiable mode each resampled particle carries the
//! pre-weight `w_bar[a] / stop(w_bar[a])`, whose value is exactly one, so the
//! forward pass is bitwise identical to the plain filter while gradients pick
//! up the dependence of the resampling probabilities on the parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{GaussianMixture, MixtureDraws, Sampler, Topology};
use crate::error::{Error, Result};
use crate::neuralnet::{make_mixture, BoundNetwork};
use crate::rng;
use crate::ssm::{StateSpaceModel, Trajectory};

/// A conditional density `k(x_t | x_{t-1}, y_t)` for a batch of parents.
pub trait Kernel {
    fn mixture(&self, tape: &mut Tape, x_prev: Var, y: &[f64]) -> Result<GaussianMixture>;
}

impl Kernel for StateSpaceModel {
    fn mixture(&self, tape: &mut Tape, x_prev: Var, _y: &[f64]) -> Result<GaussianMixture> {
        self.transition_mixture(tape, x_prev)
    }
}

/// A mixture emitted by a network bound to the current tape.
#[derive(Debug, Clone)]
pub struct NetworkKernel {
    net: BoundNetwork,
    components: usize,
    state_dim: usize,
    topology: Topology,
    sees_observation: bool,
}

impl NetworkKernel {
    /// Input is the previous state only.
    pub fn transition(net: BoundNetwork, components: usize, state_dim: usize, topology: Topology) -> Result<Self> {
        if net.input_dim() != state_dim {
            return Err(Error::shape("transition network input", state_dim, net.input_dim()));
        }
        Ok(NetworkKernel {
            net,
            components,
            state_dim,
            topology,
            sees_observation: false,
        })
    }

    /// Input is the previous state followed by the current observation.
    pub fn proposal(net: BoundNetwork, components: usize, state_dim: usize, obs_dim: usize, topology: Topology) -> Result<Self> {
        if net.input_dim() != state_dim + obs_dim {
            return Err(Error::shape("proposal network input", state_dim + obs_dim, net.input_dim()));
        }
        Ok(NetworkKernel {
            net,
            components,
            state_dim,
            topology,
            sees_observation: true,
        })
    }
}

impl Kernel for NetworkKernel {
    fn mixture(&self, tape: &mut Tape, x_prev: Var, y: &[f64]) -> Result<GaussianMixture> {
        let input = if self.sees_observation {
            let n = x_prev.rows();
            let ys = tape.constant(y.repeat(n), n, y.len());
            tape.concat_cols(x_prev, ys)?
        } else {
            x_prev
        };
        let out = self.net.forward(tape, input)?;
        Ok(make_mixture(tape, out, self.components, self.state_dim)?.with_topology(self.topology))
    }
}

/// Where new particles come from.
#[derive(Clone, Copy)]
pub enum Proposal<'a> {
    /// Sample from the transition; weights reduce to `g`.
    Bootstrap,
    /// Sample from a separate kernel and weight by `g f / pi`.
    Kernel(&'a dyn Kernel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub particles: usize,
    /// Use the stop-gradient resampling transform.
    pub differentiable: bool,
    pub sampler: Sampler,
    /// Abort a step when more than 99% of normalised weights underflow to 0.
    pub abort_on_underflow: bool,
}

impl FilterConfig {
    pub fn new(particles: usize) -> Self {
        FilterConfig {
            particles,
            differentiable: false,
            sampler: Sampler::StopGradient,
            abort_on_underflow: false,
        }
    }

    pub fn differentiable(mut self, on: bool) -> Self {
        self.differentiable = on;
        self
    }

    pub fn training(mut self) -> Self {
        self.differentiable = true;
        self.abort_on_underflow = true;
        self
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }
}

/// One filtering step's ensemble and diagnostics.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// `K x d` particles.
    pub particles: Var,
    /// Unnormalised log-weights `log w_t`, `K x 1`.
    pub log_weights: Var,
    /// Normalised log-weights, `K x 1`.
    pub log_norm_weights: Var,
    pub ancestors: Vec<usize>,
    pub mean: Vec<f64>,
    pub ess: f64,
    /// `logsumexp_k(log w_t) - log K`.
    pub step_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    pub initial: Var,
    pub steps: Vec<StepRecord>,
    /// Sum over steps and particles of `log w_t` plus the resampling
    /// pre-weight terms (which are zero in value).
    pub objective: Var,
    /// Marginal likelihood estimate, for diagnostics.
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub loglik: f64,
    pub mse_vs_truth: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub particles: usize,
}

impl FilterResult {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.mean.clone()).collect()
    }

    pub fn ess(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.ess).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let dx = self.steps.first().map_or(0, |s| s.mean.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=dx).map(|i| format!("mean_{i}")));
        header.push("ess".into());
        header.push("step_loglik".into());
        w.write_record(&header)?;
        for (t, s) in self.steps.iter().enumerate() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(s.mean.iter().map(|v| v.to_string()));
            row.push(s.ess.to_string());
            row.push(s.step_loglik.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, truth: Option<&Trajectory>, topology: Topology, config_hash: &str, seed: u64) -> Result<FilterSummary> {
        let mse_vs_truth = match truth {
            Some(tr) => Some(crate::bench::compute_mse_on(&self.means(), &tr.states[1..], topology)?),
            None => None,
        };
        Ok(FilterSummary {
            loglik: self.log_likelihood,
            mse_vs_truth,
            config_hash: config_hash.to_string(),
            seed,
            steps: self.steps.len(),
            particles: self.steps.first().map_or(0, |s| s.ancestors.len()),
        })
    }
}

/// Weighted particle average. Circular coordinates use the weighted
/// circular mean.
pub fn estimate_state(particles: &[f64], log_norm_weights: &[f64], dim: usize, topology: Topology) -> Vec<f64> {
    let w: Vec<f64> = log_norm_weights.iter().map(|l| l.exp()).collect();
    match topology {
        Topology::Euclidean => (0..dim)
            .map(|i| w.iter().enumerate().map(|(k, wk)| wk * particles[k * dim + i]).sum())
            .collect(),
        Topology::Circular => (0..dim)
            .map(|i| {
                let (mut c, mut s) = (0.0, 0.0);
                for (k, wk) in w.iter().enumerate() {
                    let x = particles[k * dim + i];
                    c += wk * x.cos();
                    s += wk * x.sin();
                }
                s.atan2(c)
            })
            .collect(),
    }
}

/// Independent categorical draws, one per uniform, on unnormalised weights.
pub fn multinomial_ancestors(weights: &[f64], uniforms: &[f64]) -> Vec<usize> {
    let mut cum = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for w in weights {
        total += w;
        cum.push(total);
    }
    let last = weights.len().saturating_sub(1);
    uniforms
        .iter()
        .map(|u| cum.partition_point(|c| *c <= u * total).min(last))
        .collect()
}

fn logsumexp_values(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Runs the filter over `ys`. Step `t` draws from the substream `(key, t)`;
/// the initial ensemble uses `(key, 0)`.
pub fn run_filter(
    tape: &mut Tape,
    model: &StateSpaceModel,
    transition: &dyn Kernel,
    proposal: Proposal<'_>,
    ys: &[Vec<f64>],
    config: &FilterConfig,
    key: u64,
) -> Result<FilterResult> {
    let k = config.particles;
    let d = model.state_dim();
    if k == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    if ys.is_empty() {
        return Err(Error::Config("observation series is empty".into()));
    }
    let topology = model.topology();

    let mut r0 = rng::stream(key, &[0]);
    let init: Vec<f64> = (0..k).flat_map(|_| model.initial_sample(&mut r0)).collect();
    let initial = tape.constant(init, k, d);
    let mut particles = initial;
    let mut log_norm = tape.constant(vec![-(k as f64).ln(); k], k, 1);

    let mut steps = Vec::with_capacity(ys.len());
    let mut terms = Vec::with_capacity(ys.len());
    let mut log_likelihood = 0.0;

    for (i, y) in ys.iter().enumerate() {
        let t = i + 1;
        if y.len() != model.obs_dim() {
            return Err(Error::shape("run_filter observation", model.obs_dim(), y.len()));
        }
        let mut r = rng::stream(key, &[t as u64]);

        let weights: Vec<f64> = tape.value(log_norm).iter().map(|l| l.exp()).collect();
        let uniforms: Vec<f64> = (0..k).map(|_| rand::Rng::random::<f64>(&mut r)).collect();
        let ancestors = multinomial_ancestors(&weights, &uniforms);

        let parents = tape.gather_rows(particles, &ancestors)?;
        let pre = if config.differentiable {
            let selected = tape.gather_rows(log_norm, &ancestors)?;
            let stopped = tape.stop_gradient(selected);
            tape.sub(selected, stopped)?
        } else {
            tape.constant(vec![0.0; k], k, 1)
        };

        let (log_w, x_new) = match proposal {
            Proposal::Bootstrap => {
                let f = transition.mixture(tape, parents, y)?;
                let draws = MixtureDraws::generate(&mut r, k, f.components(), d, config.sampler);
                let x = f.sample(tape, &draws, config.sampler)?;
                (model.observation_log_density(tape, x, y)?, x)
            }
            Proposal::Kernel(pi_kernel) => {
                let pi = pi_kernel.mixture(tape, parents, y)?;
                let draws = MixtureDraws::generate(&mut r, k, pi.components(), d, config.sampler);
                let x = pi.sample(tape, &draws, config.sampler)?;
                let lg = model.observation_log_density(tape, x, y)?;
                let f = transition.mixture(tape, parents, y)?;
                let lf = f.log_density(tape, x)?;
                let lpi = pi.log_density(tape, x)?;
                let num = tape.add(lg, lf)?;
                (tape.sub(num, lpi)?, x)
            }
        };

        let lw_values = tape.value(log_w);
        if lw_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Degenerate {
                step: t,
                reason: "non-finite log-weight".into(),
            });
        }
        if lw_values.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Degenerate {
                step: t,
                reason: "all log-weights are -inf".into(),
            });
        }
        let step_loglik = logsumexp_values(lw_values) - (k as f64).ln();

        let u = tape.add(log_w, pre)?;
        let lse = tape.logsumexp(u)?;
        let lse_rep = tape.gather(lse, vec![0; k], k, 1)?;
        let normed = tape.sub(u, lse_rep)?;

        let lnw = tape.value(normed);
        if config.abort_on_underflow {
            let dead = lnw.iter().filter(|l| l.exp() == 0.0).count();
            if dead * 100 > 99 * k {
                return Err(Error::Degenerate {
                    step: t,
                    reason: format!("{dead} of {k} normalised weights underflow"),
                });
            }
        }
        let ess = 1.0 / lnw.iter().map(|l| (2.0 * l).exp()).sum::<f64>();
        let mean = estimate_state(tape.value(x_new), lnw, d, topology);

        terms.push(tape.sum(u));
        log_likelihood += step_loglik;
        steps.push(StepRecord {
            particles: x_new,
            log_weights: log_w,
            log_norm_weights: normed,
            ancestors,
            mean,
            ess,
            step_loglik,
        });
        particles = x_new;
        log_norm = normed;
    }

    let stacked = tape.concat(&terms)?;
    let objective = tape.sum(stacked);
    Ok(FilterResult {
        initial,
        steps,
        objective,
        log_likelihood,
    })
}

/// Plain bootstrap filter with the true model, returning filtering means.
pub fn bootstrap_filter(model: &StateSpaceModel, ys: &[Vec<f64>], particles: usize, key: u64) -> Result<FilterResult> {
    let mut tape = Tape::new();
    run_filter(&mut tape, model, model, Proposal::Bootstrap, ys, &FilterConfig::new(particles), key)
}

//! Evaluation metrics and parameter sweeps.
//!
//! A sweep trains the requested models once per swept value on a dedicated
//! training series, then filters `runs` fresh series with every method and
//! reports each method's MSE relative to a bootstrap filter with the same
//! particle budget on the same series.

pub mod cli;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distributions::Topology;
use crate::error::{Error, Result};
use crate::filter::bootstrap_filter;
use crate::rng;
use crate::ssm::{simulate, ModelConfig, StateSpaceModel, Trajectory};
use crate::training::{propmixnn_train, statemixnn_train, LearnedModel, TrainConfig};

/// `(1 / (T d)) sum_t |x_hat_t - x_t|^2`.
pub fn compute_mse(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    compute_mse_on(estimates, truth, Topology::Euclidean)
}

/// MSE with coordinate differences taken on the given topology.
pub fn compute_mse_on(estimates: &[Vec<f64>], truth: &[Vec<f64>], topology: Topology) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::shape("compute_mse", truth.len(), estimates.len()));
    }
    let d = truth[0].len();
    let mut total = 0.0;
    for (e, x) in estimates.iter().zip(truth) {
        if e.len() != d || x.len() != d {
            return Err(Error::shape("compute_mse", d, e.len()));
        }
        total += e
            .iter()
            .zip(x)
            .map(|(a, b)| topology.canonicalize_value(a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / (estimates.len() * d) as f64)
}

pub fn relative_improvement(mse_method: f64, mse_baseline: f64) -> Result<f64> {
    if !(mse_baseline > 0.0) {
        return Err(Error::contract("relative_improvement", format!("baseline MSE must be positive, got {mse_baseline}")));
    }
    Ok(mse_method / mse_baseline)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
pub fn sign_test_p_value(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut coef = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            coef = coef * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += coef;
        }
    }
    p / 2f64.powi(n as i32)
}

/// Short SHA-256 of a value's JSON serialisation.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodSpec {
    Bpf,
    StateMixNN { components: usize },
    PropMixNN { components: usize },
    /// Reserved; always reported as absent.
    Iapf,
}

impl MethodSpec {
    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::Bpf => "bpf",
            MethodSpec::StateMixNN { .. } => "statemixnn",
            MethodSpec::PropMixNN { .. } => "propmixnn",
            MethodSpec::Iapf => "iapf",
        }
    }

    pub fn components(&self) -> Option<usize> {
        match self {
            MethodSpec::StateMixNN { components } | MethodSpec::PropMixNN { components } => Some(*components),
            _ => None,
        }
    }

    /// Trains the model this method needs, if any.
    pub fn train(&self, model: &StateSpaceModel, train: &Trajectory, config: &TrainConfig) -> Result<Option<LearnedModel>> {
        let with_s = |s: usize| TrainConfig {
            transition_components: s,
            proposal_components: s,
            ..config.clone()
        };
        match self {
            MethodSpec::StateMixNN { components } => statemixnn_train(model, &train.observations, &with_s(*components), None).map(Some),
            MethodSpec::PropMixNN { components } => propmixnn_train(model, &train.observations, &with_s(*components), None).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    Particles,
    Steps,
    SigmaV,
    Dim,
}

impl SweepKey {
    pub fn name(self) -> &'static str {
        match self {
            SweepKey::Particles => "particles",
            SweepKey::Steps => "steps",
            SweepKey::SigmaV => "sigma_v",
            SweepKey::Dim => "dim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

/// A sweep as read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub model: ModelConfig,
    pub sweep: Sweep,
    /// Series length `T` when not swept.
    pub steps: usize,
    /// Particle count `K` when not swept.
    pub particles: usize,
    pub runs: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub record_timing: bool,
}

/// Fully resolved settings for one swept value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub value: f64,
    pub model: ModelConfig,
    pub steps: usize,
    pub particles: usize,
}

fn as_count(key: SweepKey, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{} values must be positive integers, got {v}", key.name())))
    }
}

impl SweepSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn cell(&self, value: f64) -> Result<Cell> {
        let mut cell = Cell {
            value,
            model: self.model.clone(),
            steps: self.steps,
            particles: self.particles,
        };
        match self.sweep.key {
            SweepKey::Particles => cell.particles = as_count(self.sweep.key, value)?,
            SweepKey::Steps => cell.steps = as_count(self.sweep.key, value)?,
            SweepKey::SigmaV => match &mut cell.model {
                ModelConfig::Lorenz96(c) => c.sigma_v = value,
                ModelConfig::Kuramoto(c) => c.sigma_v = value,
                ModelConfig::LinearGaussian(c) => c.q = value * value,
            },
            SweepKey::Dim => {
                let d = as_count(self.sweep.key, value)?;
                match &mut cell.model {
                    ModelConfig::Lorenz96(c) => c.dim = d,
                    ModelConfig::Kuramoto(c) => c.dim = d,
                    ModelConfig::LinearGaussian(_) => return Err(Error::Config("the linear-Gaussian model is one-dimensional".into())),
                }
            }
        }
        cell.model.validate()?;
        Ok(cell)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.methods.is_empty() || self.sweep.values.is_empty() {
            return Err(Error::Config("a sweep needs runs, methods and values".into()));
        }
        for v in &self.sweep.values {
            self.cell(*v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub system: String,
    pub swept_key: String,
    pub swept_value: f64,
    pub method: String,
    #[serde(rename = "S")]
    pub components: Option<usize>,
    pub run: usize,
    pub series_hash: String,
    pub mse: f64,
    pub ri_mse: f64,
    pub loglik: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub swept_key: String,
    pub swept_value: f64,
    pub method: String,
    #[serde(rename = "S")]
    pub components: Option<usize>,
    pub ri_mse_mean: Option<f64>,
    pub ri_mse_p2_5: Option<f64>,
    pub ri_mse_p97_5: Option<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub metrics: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// `(swept value, method label, S, error)` for cells that could not be trained.
    pub failures: Vec<(f64, String, Option<usize>, String)>,
}

/// Summary rows recomputed from per-run rows of one method and value.
pub fn summarize(rows: &[MetricRow], system: &str, key: &str, value: f64, method: &MethodSpec) -> SummaryRow {
    let ri: Vec<f64> = rows
        .iter()
        .filter(|r| r.swept_value == value && r.method == method.label() && r.components == method.components())
        .map(|r| r.ri_mse)
        .collect();
    let mean = (!ri.is_empty()).then(|| ri.iter().sum::<f64>() / ri.len() as f64);
    SummaryRow {
        system: system.to_string(),
        swept_key: key.to_string(),
        swept_value: value,
        method: method.label().to_string(),
        components: method.components(),
        ri_mse_mean: mean,
        ri_mse_p2_5: percentile(&ri, 2.5),
        ri_mse_p97_5: percentile(&ri, 97.5),
        n_runs: ri.len(),
    }
}

fn method_tag(m: &MethodSpec) -> u64 {
    rng::label(m.label()) ^ m.components().unwrap_or(0) as u64
}

/// Runs every cell of the sweep. Training is sequential within a cell;
/// evaluation runs are spread over the rayon pool.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutput> {
    spec.validate()?;
    let system = spec.model.descriptor();
    let key = spec.sweep.key.name();
    let mut out = SweepOutput::default();

    for (vi, &value) in spec.sweep.values.iter().enumerate() {
        let cell = spec.cell(value)?;
        let model = StateSpaceModel::new(cell.model.clone(), spec.seed)?;
        let train_series = simulate(&model, cell.steps, rng::derive_key(spec.seed, &[rng::label("train-series"), vi as u64]))?;

        let mut trained: Vec<(MethodSpec, Option<LearnedModel>)> = Vec::new();
        for m in &spec.methods {
            if matches!(m, MethodSpec::Iapf) {
                continue;
            }
            let config = TrainConfig {
                particles: cell.particles,
                seed: rng::derive_key(spec.seed, &[rng::label("train"), vi as u64, method_tag(m)]),
                ..spec.training.clone()
            };
            match m.train(&model, &train_series, &config) {
                Ok(learned) => trained.push((m.clone(), learned)),
                Err(e) => out.failures.push((value, m.label().to_string(), m.components(), e.to_string())),
            }
        }

        let per_run: Vec<Vec<MetricRow>> = (0..spec.runs)
            .into_par_iter()
            .map(|run| evaluate_run(spec, &cell, &model, &trained, vi, run))
            .collect::<Result<_>>()?;
        let rows: Vec<MetricRow> = per_run.into_iter().flatten().collect();

        for m in &spec.methods {
            out.summary.push(summarize(&rows, system, key, value, m));
        }
        out.metrics.extend(rows);
    }
    Ok(out)
}

fn evaluate_run(
    spec: &SweepSpec,
    cell: &Cell,
    model: &StateSpaceModel,
    trained: &[(MethodSpec, Option<LearnedModel>)],
    vi: usize,
    run: usize,
) -> Result<Vec<MetricRow>> {
    let series = simulate(model, cell.steps, rng::derive_key(spec.seed, &[rng::label("eval-series"), vi as u64, run as u64]))?;
    let hash = series.series_hash();
    let truth = &series.states[1..];
    let top = model.topology();
    let filter_key = |m: &MethodSpec| rng::derive_key(spec.seed, &[rng::label("filter"), vi as u64, run as u64, method_tag(m)]);

    let started = Instant::now();
    let base = bootstrap_filter(model, &series.observations, cell.particles, filter_key(&MethodSpec::Bpf))?;
    let base_ms = started.elapsed().as_millis() as u64;
    let base_mse = compute_mse_on(&base.means(), truth, top)?;

    let row = |m: &MethodSpec, mse: f64, loglik: f64, ms: u64| -> Result<MetricRow> {
        Ok(MetricRow {
            system: cell.model.descriptor().to_string(),
            swept_key: spec.sweep.key.name().to_string(),
            swept_value: cell.value,
            method: m.label().to_string(),
            components: m.components(),
            run,
            series_hash: hash.clone(),
            mse,
            ri_mse: relative_improvement(mse, base_mse)?,
            loglik,
            wall_ms: if spec.record_timing { ms } else { 0 },
        })
    };

    let mut rows = Vec::new();
    for (m, learned) in trained {
        match (m, learned) {
            (MethodSpec::Bpf, _) => rows.push(row(m, base_mse, base.log_likelihood, base_ms)?),
            (_, Some(lm)) => {
                let started = Instant::now();
                // a degenerate evaluation run leaves this method's row absent
                if let Ok(res) = lm.filter(model, &series.observations, cell.particles, filter_key(m)) {
                    let ms = started.elapsed().as_millis() as u64;
                    let mse = compute_mse_on(&res.means(), truth, top)?;
                    rows.push(row(m, mse, res.log_likelihood, ms)?);
                }
            }
            (_, None) => {}
        }
    }
    Ok(rows)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl SweepOutput {
    pub fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "system",
            "swept_key",
            "swept_value",
            "method",
            "S",
            "run",
            "series_hash",
            "mse",
            "ri_mse",
            "loglik",
            "wall_ms",
        ])?;
        for r in &self.metrics {
            w.write_record([
                r.system.clone(),
                r.swept_key.clone(),
                r.swept_value.to_string(),
                r.method.clone(),
                opt(&r.components),
                r.run.to_string(),
                r.series_hash.clone(),
                r.mse.to_string(),
                r.ri_mse.to_string(),
                r.loglik.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "system",
            "swept_key",
            "swept_value",
            "method",
            "S",
            "ri_mse_mean",
            "ri_mse_p2_5",
            "ri_mse_p97_5",
            "n_runs",
        ])?;
        for r in &self.summary {
            w.write_record([
                r.system.clone(),
                r.swept_key.clone(),
                r.swept_value.to_string(),
                r.method.clone(),
                opt(&r.components),
                opt(&r.ri_mse_mean),
                opt(&r.ri_mse_p2_5),
                opt(&r.ri_mse_p97_5),
                r.n_runs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

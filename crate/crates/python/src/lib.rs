//! Python bindings: simulate, filter, train and evaluate from Python.
//!
//! Configurations are passed as TOML text in the same format the CLI reads.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::statemix::bench::cli::ExperimentConfig;
use ::statemix::bench::{compute_mse_on, MethodSpec};
use ::statemix::filter::{bootstrap_filter as run_bootstrap, FilterResult};
use ::statemix::neuralnet::Checkpoint;
use ::statemix::ssm::{self, ModelConfig, StateSpaceModel};
use ::statemix::training::{self, TrainConfig};

fn err(e: ::statemix::Error) -> PyErr {
    PyValueError::new_err(format!("{} ({})", e, e.kind()))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A state-space model: Lorenz 96, Kuramoto or scalar linear-Gaussian.
#[pyclass(frozen)]
struct Model {
    inner: StateSpaceModel,
}

#[pymethods]
impl Model {
    /// `config` is a TOML `[model]` table body, e.g. `system = "lorenz96"\ndim = 5`.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = parse(config)?;
        Ok(Model {
            inner: StateSpaceModel::new(cfg, seed).map_err(err)?,
        })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn simulate(&self, steps: usize, seed: u64) -> PyResult<Trajectory> {
        Ok(Trajectory {
            inner: ssm::simulate(&self.inner, steps, seed).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Model({:?})", self.inner.config())
    }
}

#[pyclass(frozen)]
struct Trajectory {
    inner: ssm::Trajectory,
}

#[pymethods]
impl Trajectory {
    /// `x_0 .. x_T`.
    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.inner.states.clone()
    }

    /// `y_1 .. y_T`.
    #[getter]
    fn observations(&self) -> Vec<Vec<f64>> {
        self.inner.observations.clone()
    }

    #[getter]
    fn series_hash(&self) -> String {
        self.inner.series_hash()
    }

    /// The model that generated this series, including Kuramoto frequencies.
    fn model(&self) -> PyResult<Model> {
        Ok(Model {
            inner: self.inner.model().map_err(err)?,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
    fn save(&self, dir: &str, stem: &str) -> PyResult<(String, String)> {
        let (csv, side) = self.inner.save(dir, stem).map_err(err)?;
        Ok((csv.display().to_string(), side.display().to_string()))
    }

    #[staticmethod]
    fn load(csv: &str, sidecar: &str) -> PyResult<Self> {
        Ok(Trajectory {
            inner: ssm::Trajectory::load(csv, sidecar).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.observations.len()
    }
}

/// Per-step filter output with the tape already discarded.
#[pyclass(frozen, get_all)]
struct FilterOutput {
    means: Vec<Vec<f64>>,
    ess: Vec<f64>,
    step_loglik: Vec<f64>,
    log_likelihood: f64,
}

impl From<FilterResult> for FilterOutput {
    fn from(r: FilterResult) -> Self {
        FilterOutput {
            means: r.means(),
            ess: r.steps.iter().map(|s| s.ess).collect(),
            step_loglik: r.steps.iter().map(|s| s.step_loglik).collect(),
            log_likelihood: r.log_likelihood,
        }
    }
}

#[pymethods]
impl FilterOutput {
    /// MSE of the state estimates against `trajectory.states[1:]`, with
    /// wrapped differences for circular models.
    fn mse(&self, trajectory: &Trajectory) -> PyResult<f64> {
        let top = trajectory.inner.model().map_err(err)?.topology();
        compute_mse_on(&self.means, &trajectory.inner.states[1..], top).map_err(err)
    }
}

#[pyfunction]
fn bootstrap_filter(model: &Model, observations: Vec<Vec<f64>>, particles: usize, seed: u64) -> PyResult<FilterOutput> {
    Ok(run_bootstrap(&model.inner, &observations, particles, seed).map_err(err)?.into())
}

#[pyclass(frozen)]
struct LearnedModel {
    inner: training::LearnedModel,
}

#[pymethods]
impl LearnedModel {
    fn filter(&self, model: &Model, observations: Vec<Vec<f64>>, particles: usize, seed: u64) -> PyResult<FilterOutput> {
        Ok(self.inner.filter(&model.inner, &observations, particles, seed).map_err(err)?.into())
    }

    #[getter]
    fn has_transition(&self) -> bool {
        self.inner.transition.is_some()
    }

    #[getter]
    fn update_count(&self) -> usize {
        self.inner.update_count()
    }

    /// One dict per update step.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .history
            .iter()
            .map(|h| {
                let d = PyDict::new(py);
                d.set_item("phase", h.phase.name())?;
                d.set_item("a", h.a)?;
                d.set_item("b", h.b)?;
                d.set_item("j", h.j)?;
                d.set_item("objective", h.objective)?;
                d.set_item("grad_norm", h.grad_norm)?;
                d.set_item("clipped", h.clipped)?;
                Ok(d)
            })
            .collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.checkpoint().save(path).map_err(err)
    }

    /// Loads a checkpoint. `training` is an optional `[training]` TOML body
    /// whose sampler is used for filtering.
    #[staticmethod]
    #[pyo3(signature = (path, training = ""))]
    fn load(path: &str, training: &str) -> PyResult<Self> {
        let config: TrainConfig = parse(training)?;
        let ckpt = Checkpoint::load(path).map_err(err)?;
        Ok(LearnedModel {
            inner: training::LearnedModel::from_checkpoint(&ckpt, config).map_err(err)?,
        })
    }
}

/// Trains the method named in `config` (CLI experiment TOML) on
/// `observations`. Checkpoints go to `checkpoint_dir` when given.
#[pyfunction]
#[pyo3(signature = (model, observations, config = "", seed = 0, checkpoint_dir = None))]
fn train(py: Python<'_>, model: &Model, observations: Vec<Vec<f64>>, config: &str, seed: u64, checkpoint_dir: Option<&str>) -> PyResult<LearnedModel> {
    let cfg: ExperimentConfig = parse(config)?;
    let base = TrainConfig {
        seed,
        particles: cfg.particles,
        ..cfg.training
    };
    let dir = checkpoint_dir.map(std::path::Path::new);
    let learned = py
        .detach(|| match cfg.method {
            MethodSpec::StateMixNN { components } => training::statemixnn_train(
                &model.inner,
                &observations,
                &TrainConfig {
                    transition_components: components,
                    proposal_components: components,
                    ..base
                },
                dir,
            ),
            MethodSpec::PropMixNN { components } => training::propmixnn_train(
                &model.inner,
                &observations,
                &TrainConfig {
                    proposal_components: components,
                    ..base
                },
                dir,
            ),
            other => Err(::statemix::Error::Config(format!("method {} has nothing to train", other.label()))),
        })
        .map_err(err)?;
    Ok(LearnedModel { inner: learned })
}

#[pymodule]
fn statemix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<FilterOutput>()?;
    m.add_class::<LearnedModel>()?;
    m.add_function(wrap_pyfunction!(bootstrap_filter, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

//! Learning the transition and proposal networks.
//!
//! Training alternates conditional updates: the proposal is fitted with the
//! transition held fixed, then the transition with the new proposal held
//! fixed. Each conditional update walks through telescoping prefixes of the
//! observation series and takes a fixed number of ADAM steps on each prefix.
//! Before alternating, the transition is warmed up as a bootstrap filter
//! whose proposal is the transition itself.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::Sampler;
use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterConfig, FilterResult, Kernel, NetworkKernel, Proposal};
use crate::neuralnet::{clip_global_norm, AdamConfig, AdamState, Architecture, Checkpoint, NetworkParams, NetworkRecord};
use crate::rng;
use crate::ssm::StateSpaceModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of telescoping batches; `None` means `ceil(T / 5)`.
    pub batches: Option<usize>,
    pub steps_per_batch: usize,
    pub iterations: usize,
    pub particles: usize,
    pub learning_rate: f64,
    pub transition_components: usize,
    pub proposal_components: usize,
    pub hidden: Vec<usize>,
    pub clip_norm: f64,
    pub sampler: Sampler,
    pub seed: u64,
    /// Fill `wall_ms` in the history. Off by default so outputs are reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batches: None,
            steps_per_batch: 50,
            iterations: 20,
            particles: 100,
            learning_rate: 3e-3,
            transition_components: 1,
            proposal_components: 1,
            hidden: vec![128, 256],
            clip_norm: 10.0,
            sampler: Sampler::StopGradient,
            seed: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_count(&self, series_len: usize) -> usize {
        self.batches.unwrap_or_else(|| series_len.div_ceil(5))
    }

    pub fn validate(&self, series_len: usize) -> Result<()> {
        let b = self.batch_count(series_len);
        if series_len == 0 {
            return Err(Error::Config("training series is empty".into()));
        }
        if b == 0 || b > series_len {
            return Err(Error::Config(format!("batch count must be in 1..={series_len}, got {b}")));
        }
        if self.steps_per_batch == 0 || self.particles == 0 {
            return Err(Error::Config("steps per batch and particle count must be at least 1".into()));
        }
        if self.transition_components == 0 || self.proposal_components == 0 {
            return Err(Error::Config("mixtures need at least one component".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate must be >= 0 and clip norm > 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }

    fn filter(&self) -> FilterConfig {
        FilterConfig::new(self.particles).training().with_sampler(self.sampler)
    }
}

/// Prefix lengths `ceil(b T / B)` for `b = 1..=B`.
pub fn batch_prefix_lengths(series_len: usize, batches: usize) -> Result<Vec<usize>> {
    if batches == 0 || batches > series_len {
        return Err(Error::Config(format!("batch count must be in 1..={series_len}, got {batches}")));
    }
    Ok((1..=batches).map(|b| (b * series_len).div_ceil(batches)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Prop,
    Trans,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Prop => "prop",
            Phase::Trans => "trans",
        }
    }

    fn label(self) -> u64 {
        match self {
            Phase::Warmup => 0,
            Phase::Prop => 1,
            Phase::Trans => 2,
        }
    }
}

/// Which network is learned and what the other densities are.
#[derive(Clone, Copy)]
pub enum Setting<'a> {
    /// Learn the transition; the proposal is the transition itself.
    Warmup,
    /// Learn the proposal given a transition network, or the true kernel when `None`.
    LearnProposal { transition: Option<&'a NetworkParams> },
    /// Learn the transition given the proposal network.
    LearnTransition { proposal: &'a NetworkParams },
}

impl Setting<'_> {
    fn phase(&self) -> Phase {
        match self {
            Setting::Warmup => Phase::Warmup,
            Setting::LearnProposal { .. } => Phase::Prop,
            Setting::LearnTransition { .. } => Phase::Trans,
        }
    }

    fn static_params(&self) -> Option<&NetworkParams> {
        match self {
            Setting::Warmup => None,
            Setting::LearnProposal { transition } => *transition,
            Setting::LearnTransition { proposal } => Some(proposal),
        }
    }
}

/// Dimensions and mixture sizes shared by every update.
#[derive(Debug, Clone, Copy)]
pub struct Shapes {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub transition_components: usize,
    pub proposal_components: usize,
}

impl Shapes {
    pub fn new(model: &StateSpaceModel, config: &TrainConfig) -> Self {
        Shapes {
            state_dim: model.state_dim(),
            obs_dim: model.obs_dim(),
            transition_components: config.transition_components,
            proposal_components: config.proposal_components,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: Phase,
    pub a: usize,
    pub b: usize,
    pub j: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub wall_ms: u64,
    /// Whether the first attempt hit a degenerate filter and was rerun.
    #[serde(skip)]
    pub retried: bool,
    /// Digest of the parameters held fixed during this step.
    #[serde(skip)]
    pub static_digest: Option<String>,
    /// Digest of the learned parameters after this step.
    #[serde(skip)]
    pub learned_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub objective: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub retried: bool,
}

fn build_and_run(
    tape: &mut Tape,
    model: &StateSpaceModel,
    learn: &NetworkParams,
    setting: Setting<'_>,
    shapes: &Shapes,
    ys: &[Vec<f64>],
    filter: &FilterConfig,
    key: u64,
) -> Result<(FilterResult, Vec<crate::autodiff::Var>)> {
    let top = model.topology();
    let learned = learn.bind(tape, true);
    let vars = learned.vars();
    let result = match setting {
        Setting::Warmup => {
            let f = NetworkKernel::transition(learned, shapes.transition_components, shapes.state_dim, top)?;
            run_filter(tape, model, &f, Proposal::Bootstrap, ys, filter, key)?
        }
        Setting::LearnProposal { transition } => {
            let pi = NetworkKernel::proposal(learned, shapes.proposal_components, shapes.state_dim, shapes.obs_dim, top)?;
            match transition {
                Some(tp) => {
                    let f = NetworkKernel::transition(tp.bind(tape, false), shapes.transition_components, shapes.state_dim, top)?;
                    run_filter(tape, model, &f, Proposal::Kernel(&pi), ys, filter, key)?
                }
                None => run_filter(tape, model, model, Proposal::Kernel(&pi), ys, filter, key)?,
            }
        }
        Setting::LearnTransition { proposal } => {
            let f = NetworkKernel::transition(learned, shapes.transition_components, shapes.state_dim, top)?;
            let pi = NetworkKernel::proposal(proposal.bind(tape, false), shapes.proposal_components, shapes.state_dim, shapes.obs_dim, top)?;
            run_filter(tape, model, &f, Proposal::Kernel(&pi), ys, filter, key)?
        }
    };
    Ok((result, vars))
}

/// Runs the differentiable filter on `ys` and applies one ADAM step to
/// `learn`, maximising the filter objective. A degenerate filter run is
/// retried once on a fresh substream before the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn update_step(
    model: &StateSpaceModel,
    learn: &mut NetworkParams,
    adam: &mut AdamState,
    setting: Setting<'_>,
    shapes: &Shapes,
    ys: &[Vec<f64>],
    config: &TrainConfig,
    key: u64,
) -> Result<StepOutcome> {
    if ys.is_empty() {
        return Err(Error::Config("update step needs at least one observation".into()));
    }
    let filter = config.filter();
    let mut tape = Tape::new();
    let (result, vars, retried) = match build_and_run(&mut tape, model, learn, setting, shapes, ys, &filter, key) {
        Ok((r, v)) => (r, v, false),
        Err(Error::Degenerate { .. }) => {
            tape = Tape::new();
            let (r, v) = build_and_run(&mut tape, model, learn, setting, shapes, ys, &filter, rng::derive_key(key, &[rng::label("retry")]))?;
            (r, v, true)
        }
        Err(e) => return Err(e),
    };
    let objective = tape.scalar(result.objective);
    let grads = tape.backward(result.objective)?;
    let mut loss_grads: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v).into_iter().map(|g| -g).collect()).collect();
    let (grad_norm, clipped) = clip_global_norm(&mut loss_grads, config.clip_norm);
    adam.step(learn, &loss_grads)?;
    Ok(StepOutcome {
        objective,
        grad_norm,
        clipped,
        retried,
    })
}

/// Result of one conditional update.
#[derive(Debug, Clone)]
pub struct ConditionalOutcome {
    pub params: NetworkParams,
    pub history: Vec<HistoryRow>,
}

/// `B` telescoping batches with `J` update steps each, starting from a
/// fresh optimiser state.
#[allow(clippy::too_many_arguments)]
pub fn conditional_update(
    model: &StateSpaceModel,
    batches: usize,
    steps_per_batch: usize,
    start: &NetworkParams,
    setting: Setting<'_>,
    shapes: &Shapes,
    ys: &[Vec<f64>],
    config: &TrainConfig,
    iteration: usize,
) -> Result<ConditionalOutcome> {
    let prefixes = batch_prefix_lengths(ys.len(), batches)?;
    let mut params = start.clone();
    let mut adam = AdamState::new(&params, config.adam());
    let static_digest = setting.static_params().map(NetworkParams::digest);
    let phase = setting.phase();
    let mut history = Vec::with_capacity(batches * steps_per_batch);
    for (bi, &len) in prefixes.iter().enumerate() {
        for j in 1..=steps_per_batch {
            let b = bi + 1;
            let key = rng::derive_key(config.seed, &[rng::label("train"), iteration as u64, phase.label(), b as u64, j as u64]);
            let started = Instant::now();
            let out = update_step(model, &mut params, &mut adam, setting, shapes, &ys[..len], config, key)?;
            let wall_ms = if config.record_timing { started.elapsed().as_millis() as u64 } else { 0 };
            history.push(HistoryRow {
                phase,
                a: iteration,
                b,
                j,
                objective: out.objective,
                grad_norm: out.grad_norm,
                clipped: out.clipped,
                wall_ms,
                retried: out.retried,
                static_digest: static_digest.clone(),
                learned_digest: params.digest(),
            });
        }
    }
    Ok(ConditionalOutcome { params, history })
}

/// Trained networks plus their training history. `transition` is `None`
/// for a proposal-only model, which filters with the true transition.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub transition: Option<NetworkParams>,
    pub proposal: NetworkParams,
    pub history: Vec<HistoryRow>,
    pub config: TrainConfig,
    pub shapes: Shapes,
}

fn init_network(arch: &Architecture, config: &TrainConfig, which: u64) -> Result<NetworkParams> {
    NetworkParams::for_architecture(arch, &mut rng::stream(config.seed, &[rng::label("init"), which]))
}

fn architectures(shapes: &Shapes, config: &TrainConfig) -> (Architecture, Architecture) {
    (
        Architecture::transition(shapes.state_dim, &config.hidden, shapes.transition_components),
        Architecture::proposal(shapes.state_dim, shapes.obs_dim, &config.hidden, shapes.proposal_components),
    )
}

/// Alternating training of both networks on one observation series.
/// Checkpoints are written after the warm-up and after each iteration when
/// `checkpoint_dir` is given.
pub fn statemixnn_train(model: &StateSpaceModel, ys: &[Vec<f64>], config: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<LearnedModel> {
    config.validate(ys.len())?;
    let shapes = Shapes::new(model, config);
    let (f_arch, pi_arch) = architectures(&shapes, config);
    let f0 = init_network(&f_arch, config, 0)?;
    let mut proposal = init_network(&pi_arch, config, 1)?;
    let b = config.batch_count(ys.len());
    let j = config.steps_per_batch;

    let warm = conditional_update(model, b, j, &f0, Setting::Warmup, &shapes, ys, config, 0)?;
    let mut transition = warm.params;
    let mut history = warm.history;
    let mut learned = LearnedModel {
        transition: Some(transition.clone()),
        proposal: proposal.clone(),
        history: Vec::new(),
        config: config.clone(),
        shapes,
    };
    if let Some(dir) = checkpoint_dir {
        learned.checkpoint().save(dir.join("checkpoint_warmup.json"))?;
    }

    for a in 1..=config.iterations {
        let prop = conditional_update(
            model,
            b,
            j,
            &proposal,
            Setting::LearnProposal { transition: Some(&transition) },
            &shapes,
            ys,
            config,
            a,
        )?;
        proposal = prop.params;
        history.extend(prop.history);
        let trans = conditional_update(model, b, j, &transition, Setting::LearnTransition { proposal: &proposal }, &shapes, ys, config, a)?;
        transition = trans.params;
        history.extend(trans.history);
        if let Some(dir) = checkpoint_dir {
            learned.transition = Some(transition.clone());
            learned.proposal = proposal.clone();
            learned.checkpoint().save(dir.join(format!("checkpoint_iter{a:03}.json")))?;
        }
    }
    learned.transition = Some(transition);
    learned.proposal = proposal;
    learned.history = history;
    Ok(learned)
}

/// Learns only the proposal, filtering with the model's true transition.
/// Runs the same `A` proposal updates as [`statemixnn_train`] with no
/// warm-up and no transition updates.
pub fn propmixnn_train(model: &StateSpaceModel, ys: &[Vec<f64>], config: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<LearnedModel> {
    config.validate(ys.len())?;
    let shapes = Shapes::new(model, config);
    let (_, pi_arch) = architectures(&shapes, config);
    let mut proposal = init_network(&pi_arch, config, 1)?;
    let b = config.batch_count(ys.len());
    let mut history = Vec::new();
    let mut learned = LearnedModel {
        transition: None,
        proposal: proposal.clone(),
        history: Vec::new(),
        config: config.clone(),
        shapes,
    };
    for a in 1..=config.iterations {
        let out = conditional_update(model, b, config.steps_per_batch, &proposal, Setting::LearnProposal { transition: None }, &shapes, ys, config, a)?;
        proposal = out.params;
        history.extend(out.history);
        if let Some(dir) = checkpoint_dir {
            learned.proposal = proposal.clone();
            learned.checkpoint().save(dir.join(format!("checkpoint_iter{a:03}.json")))?;
        }
    }
    learned.proposal = proposal;
    learned.history = history;
    Ok(learned)
}

impl LearnedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.shapes;
        Checkpoint::new(
            s.state_dim,
            s.obs_dim,
            self.transition
                .as_ref()
                .map(|p| NetworkRecord::from_params(p, s.transition_components, s.state_dim)),
            Some(NetworkRecord::from_params(&self.proposal, s.proposal_components, s.state_dim)),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let pi = ckpt
            .proposal
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no proposal network".into()))?;
        let transition = ckpt.transition.as_ref().map(NetworkRecord::to_params).transpose()?;
        Ok(LearnedModel {
            shapes: Shapes {
                state_dim: ckpt.state_dim,
                obs_dim: ckpt.obs_dim,
                transition_components: ckpt.transition.as_ref().map_or(1, |t| t.components),
                proposal_components: pi.components,
            },
            transition,
            proposal: pi.to_params()?,
            history: Vec::new(),
            config,
        })
    }

    /// Runs the learned filter on `ys` without gradients.
    pub fn filter(&self, model: &StateSpaceModel, ys: &[Vec<f64>], particles: usize, key: u64) -> Result<FilterResult> {
        self.run(&mut Tape::new(), model, ys, &FilterConfig::new(particles).with_sampler(self.config.sampler), key)
    }

    /// Runs the learned filter on a caller-supplied tape.
    pub fn run(&self, tape: &mut Tape, model: &StateSpaceModel, ys: &[Vec<f64>], filter: &FilterConfig, key: u64) -> Result<FilterResult> {
        let s = &self.shapes;
        if s.state_dim != model.state_dim() || s.obs_dim != model.obs_dim() {
            return Err(Error::shape("LearnedModel::run", s.state_dim, model.state_dim()));
        }
        let top = model.topology();
        let pi = NetworkKernel::proposal(self.proposal.bind(tape, false), s.proposal_components, s.state_dim, s.obs_dim, top)?;
        match &self.transition {
            Some(tp) => {
                let f = NetworkKernel::transition(tp.bind(tape, false), s.transition_components, s.state_dim, top)?;
                run_filter(tape, model, &f as &dyn Kernel, Proposal::Kernel(&pi), ys, filter, key)
            }
            None => run_filter(tape, model, model, Proposal::Kernel(&pi), ys, filter, key),
        }
    }

    /// Number of filter runs that produced an update.
    pub fn update_count(&self) -> usize {
        self.history.len()
    }

    pub fn write_history_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["phase", "a", "b", "j", "objective", "grad_norm", "clipped", "wall_ms"])?;
        for h in &self.history {
            w.write_record([
                h.phase.name().to_string(),
                h.a.to_string(),
                h.b.to_string(),
                h.j.to_string(),
                h.objective.to_string(),
                h.grad_norm.to_string(),
                h.clipped.to_string(),
                h.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

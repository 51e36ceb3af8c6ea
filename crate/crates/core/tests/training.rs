use statemix::autodiff::Tape;
use statemix::filter::{bootstrap_filter, FilterConfig};
use statemix::neuralnet::{Activation, AdamConfig, AdamState, Architecture, Layer, NetworkParams};
use statemix::rng;
use statemix::ssm::{simulate, LinearGaussianConfig, Lorenz96Config, ModelConfig, StateSpaceModel};
use statemix::training::{
    propmixnn_train, statemixnn_train, update_step, HistoryRow, LearnedModel, Phase, Setting, Shapes, TrainConfig,
};
use statemix::Error;

fn lorenz5(seed: u64) -> StateSpaceModel {
    StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 5, ..Default::default() }), seed).unwrap()
}

fn linear_gaussian() -> StateSpaceModel {
    StateSpaceModel::new(ModelConfig::LinearGaussian(LinearGaussianConfig::default()), 0).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batches: Some(2),
        steps_per_batch: 2,
        iterations: 2,
        particles: 10,
        hidden: vec![8],
        seed: 5,
        ..Default::default()
    }
}

/// Proposal network whose mixture equals the linear-Gaussian transition:
/// mean `a relu(x) - a relu(-x)`, scale `sqrt(q)`.
fn proposal_matching_transition(cfg: &LinearGaussianConfig) -> NetworkParams {
    NetworkParams {
        layers: vec![
            Layer {
                weight: vec![1.0, 0.0, -1.0, 0.0],
                bias: vec![0.0, 0.0],
                outputs: 2,
                inputs: 2,
                activation: Activation::Relu,
            },
            Layer {
                weight: vec![cfg.a, -cfg.a, 0.0, 0.0],
                bias: vec![0.0, cfg.q.sqrt()],
                outputs: 2,
                inputs: 2,
                activation: Activation::Identity,
            },
        ],
    }
}

fn last_learned<'a>(rows: impl Iterator<Item = &'a HistoryRow>) -> String {
    rows.last().expect("non-empty phase").learned_digest.clone()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let model = lorenz5(0);
    let tr = simulate(&model, 6, 0).unwrap();
    let config = TrainConfig {
        learning_rate: 0.0,
        ..small_config()
    };
    let shapes = Shapes::new(&model, &config);
    let mut r = rng::stream(1, &[]);
    let f = NetworkParams::for_architecture(&Architecture::transition(5, &[8], 1), &mut r).unwrap();
    let mut pi = NetworkParams::for_architecture(&Architecture::proposal(5, 5, &[8], 1), &mut r).unwrap();
    let before = pi.clone();
    let mut adam = AdamState::new(&pi, AdamConfig::with_learning_rate(0.0));
    let out = update_step(&model, &mut pi, &mut adam, Setting::LearnProposal { transition: Some(&f) }, &shapes, &tr.observations, &config, 3).unwrap();
    assert_eq!(pi, before);
    assert!(out.objective.is_finite() && out.grad_norm > 0.0);
}

#[test]
fn static_network_is_untouched_by_an_update() {
    let model = lorenz5(0);
    let tr = simulate(&model, 6, 0).unwrap();
    let config = small_config();
    let shapes = Shapes::new(&model, &config);
    let mut r = rng::stream(2, &[]);
    let mut f = NetworkParams::for_architecture(&Architecture::transition(5, &[8], 1), &mut r).unwrap();
    let pi = NetworkParams::for_architecture(&Architecture::proposal(5, 5, &[8], 1), &mut r).unwrap();
    let digest = pi.digest();
    let before = f.clone();
    let mut adam = AdamState::new(&f, AdamConfig::default());
    update_step(&model, &mut f, &mut adam, Setting::LearnTransition { proposal: &pi }, &shapes, &tr.observations, &config, 3).unwrap();
    assert_eq!(pi.digest(), digest);
    assert_ne!(f, before);
}

#[test]
fn alternation_feeds_each_new_network_into_the_next_update() {
    let model = lorenz5(1);
    let tr = simulate(&model, 10, 1).unwrap();
    let config = small_config();
    let learned = statemixnn_train(&model, &tr.observations, &config, None).unwrap();
    let h = &learned.history;
    let (a, b, j) = (config.iterations, 2, config.steps_per_batch);
    assert_eq!(h.len(), 2 * a * b * j + b * j);

    let warm = last_learned(h.iter().filter(|r| r.phase == Phase::Warmup));
    let mut prev_transition = warm;
    for it in 1..=a {
        let prop: Vec<_> = h.iter().filter(|r| r.phase == Phase::Prop && r.a == it).collect();
        let trans: Vec<_> = h.iter().filter(|r| r.phase == Phase::Trans && r.a == it).collect();
        assert_eq!(prop.len(), b * j);
        assert_eq!(trans.len(), b * j);
        // the proposal update at iteration a conditions on the transition from a-1
        assert!(prop.iter().all(|r| r.static_digest.as_deref() == Some(prev_transition.as_str())));
        let new_proposal = last_learned(prop.iter().copied());
        assert!(trans.iter().all(|r| r.static_digest.as_deref() == Some(new_proposal.as_str())));
        prev_transition = last_learned(trans.iter().copied());
    }
    assert_eq!(learned.transition.as_ref().unwrap().digest(), prev_transition);
    assert!(h.iter().filter(|r| r.phase == Phase::Warmup).all(|r| r.static_digest.is_none()));
}

#[test]
fn proposal_only_training_counts_runs_and_has_no_transition() {
    let model = lorenz5(2);
    let tr = simulate(&model, 10, 2).unwrap();
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let learned = propmixnn_train(&model, &tr.observations, &config, Some(dir.path())).unwrap();
    assert_eq!(learned.update_count(), config.iterations * 2 * config.steps_per_batch);
    assert!(learned.history.iter().all(|r| r.phase == Phase::Prop && r.static_digest.is_none()));
    let ckpt = learned.checkpoint();
    assert!(ckpt.transition.is_none());
    assert!(ckpt.proposal.is_some());
    assert!(dir.path().join("checkpoint_iter002.json").exists());
}

#[test]
fn proposal_equal_to_transition_with_zero_rate_filters_like_bootstrap() {
    let cfg = LinearGaussianConfig::default();
    let model = linear_gaussian();
    let tr = simulate(&model, 20, 3).unwrap();
    let config = TrainConfig {
        learning_rate: 0.0,
        particles: 50,
        hidden: vec![2],
        ..Default::default()
    };
    let shapes = Shapes::new(&model, &config);
    let mut pi = proposal_matching_transition(&cfg);
    let start = pi.clone();
    let mut adam = AdamState::new(&pi, AdamConfig::with_learning_rate(0.0));
    update_step(&model, &mut pi, &mut adam, Setting::LearnProposal { transition: None }, &shapes, &tr.observations, &config, 8).unwrap();
    assert_eq!(pi, start);

    let learned = LearnedModel {
        transition: None,
        proposal: pi,
        history: Vec::new(),
        config: config.clone(),
        shapes,
    };
    let mut t1 = Tape::new();
    let mine = learned.run(&mut t1, &model, &tr.observations, &FilterConfig::new(50), 11).unwrap();
    let boot = bootstrap_filter(&model, &tr.observations, 50, 11).unwrap();
    for (a, b) in mine.steps.iter().zip(&boot.steps) {
        assert_eq!(a.ancestors, b.ancestors);
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
        assert!((a.ess - b.ess).abs() < 1e-9);
    }
    assert!((mine.log_likelihood - boot.log_likelihood).abs() < 1e-9);
}

#[test]
fn learning_the_proposal_on_linear_gaussian_raises_the_objective() {
    let model = linear_gaussian();
    let tr = simulate(&model, 20, 4).unwrap();
    let config = TrainConfig {
        particles: 100,
        hidden: vec![32, 32],
        learning_rate: 1e-3,
        seed: 4,
        ..Default::default()
    };
    let shapes = Shapes::new(&model, &config);
    let mut pi = NetworkParams::for_architecture(&Architecture::proposal(1, 1, &config.hidden, 1), &mut rng::stream(4, &[])).unwrap();
    let mut adam = AdamState::new(&pi, AdamConfig::with_learning_rate(config.learning_rate));
    let objectives: Vec<f64> = (0..50)
        .map(|j| {
            update_step(&model, &mut pi, &mut adam, Setting::LearnProposal { transition: None }, &shapes, &tr.observations, &config, j)
                .unwrap()
                .objective
        })
        .collect();
    let smoothed: Vec<f64> = objectives.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let rises = smoothed.windows(2).filter(|p| p[1] > p[0]).count();
    let pairs = smoothed.len() - 1;
    assert!(rises * 5 >= pairs * 4, "objective rose in {rises} of {pairs} smoothed pairs: {objectives:?}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let model = lorenz5(3);
    let tr = simulate(&model, 10, 3).unwrap();
    let a = statemixnn_train(&model, &tr.observations, &small_config(), None).unwrap();
    let b = statemixnn_train(&model, &tr.observations, &small_config(), None).unwrap();
    assert_eq!(a.transition, b.transition);
    assert_eq!(a.proposal, b.proposal);
    assert_eq!(a.history, b.history);
}

#[test]
fn checkpoints_written_after_warmup_and_each_iteration() {
    let model = lorenz5(4);
    let tr = simulate(&model, 10, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    statemixnn_train(&model, &tr.observations, &small_config(), Some(dir.path())).unwrap();
    for name in ["checkpoint_warmup.json", "checkpoint_iter001.json", "checkpoint_iter002.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn collapsed_filter_is_retried_then_reported() {
    let model = lorenz5(0);
    let config = small_config();
    let shapes = Shapes::new(&model, &config);
    let mut f = NetworkParams::for_architecture(&Architecture::transition(5, &[8], 1), &mut rng::stream(0, &[])).unwrap();
    let mut adam = AdamState::new(&f, AdamConfig::default());
    let ys = vec![vec![1e200; 5]];
    let err = update_step(&model, &mut f, &mut adam, Setting::Warmup, &shapes, &ys, &config, 0).unwrap_err();
    assert!(matches!(err, Error::Degenerate { step: 1, .. }), "{err:?}");
}

#[test]
fn trained_model_beats_untrained_on_a_held_out_series() {
    let model = lorenz5(11);
    let train = simulate(&model, 30, rng::derive_key(11, &[rng::label("train-series")])).unwrap();
    let held_out = simulate(&model, 30, rng::derive_key(11, &[rng::label("eval-series")])).unwrap();
    let config = TrainConfig {
        steps_per_batch: 20,
        iterations: 5,
        particles: 50,
        seed: 11,
        ..Default::default()
    };
    let trained = statemixnn_train(&model, &train.observations, &config, None).unwrap();
    let untrained = statemixnn_train(&model, &train.observations, &TrainConfig { iterations: 0, learning_rate: 0.0, ..config.clone() }, None).unwrap();
    let objective = |m: &LearnedModel| {
        let mut tape = Tape::new();
        let res = m.run(&mut tape, &model, &held_out.observations, &FilterConfig::new(50), 2).unwrap();
        tape.scalar(res.objective)
    };
    let (after, before) = (objective(&trained), objective(&untrained));
    assert!(after > before, "held-out objective {after} <= untrained {before}");
}

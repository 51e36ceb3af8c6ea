use proptest::prelude::*;
use rand::Rng;

use statemix::autodiff::{Tape, Var};
use statemix::distributions::{GaussianMixture, Topology};
use statemix::filter::{bootstrap_filter, estimate_state, run_filter, FilterConfig, Kernel, Proposal};
use statemix::gradcheck;
use statemix::rng;
use statemix::ssm::{simulate, KuramotoConfig, LinearGaussianConfig, Lorenz96Config, ModelConfig, StateSpaceModel};

/// `N(y + shift, scale^2)` regardless of the parent particle.
struct CenteredOnObservation {
    shift: f64,
    scale: f64,
}

impl Kernel for CenteredOnObservation {
    fn mixture(&self, tape: &mut Tape, x_prev: Var, y: &[f64]) -> statemix::Result<GaussianMixture> {
        let (n, d) = x_prev.shape();
        let mean: Vec<f64> = (0..n).flat_map(|_| y.iter().map(|v| v + self.shift)).collect();
        let m = tape.constant(mean, n, d);
        let c = tape.constant(vec![self.scale; n * d], n, d);
        GaussianMixture::new(tape, m, c, n, 1)
    }
}

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    (-0.5 * ((x - m) / s).powi(2)).exp() / (s * std::f64::consts::TAU.sqrt())
}

fn lorenz5(seed: u64) -> StateSpaceModel {
    StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 5, ..Default::default() }), seed).unwrap()
}

#[test]
fn three_particle_weights_match_linear_space_calculator() {
    let cfg = LinearGaussianConfig::default();
    let model = StateSpaceModel::new(ModelConfig::LinearGaussian(cfg.clone()), 0).unwrap();
    let ys = vec![vec![0.8]];
    let proposal = CenteredOnObservation { shift: 0.3, scale: 0.9 };
    let mut tape = Tape::new();
    let res = run_filter(&mut tape, &model, &model, Proposal::Kernel(&proposal), &ys, &FilterConfig::new(3), 4).unwrap();

    let x0 = tape.value(res.initial).to_vec();
    let step = &res.steps[0];
    let x1 = tape.value(step.particles).to_vec();
    let raw: Vec<f64> = (0..3)
        .map(|k| {
            let parent = x0[step.ancestors[k]];
            let g = normal_pdf(0.8, x1[k], cfg.r.sqrt());
            let f = normal_pdf(x1[k], cfg.a * parent, cfg.q.sqrt());
            let pi = normal_pdf(x1[k], 1.1, 0.9);
            g * f / pi
        })
        .collect();
    let total: f64 = raw.iter().sum();
    for (k, w) in raw.iter().enumerate() {
        let got = tape.value(step.log_norm_weights)[k].exp();
        assert!((got - w / total).abs() < 1e-12, "particle {k}: {got} vs {}", w / total);
        assert!((tape.value(step.log_weights)[k] - w.ln()).abs() < 1e-12);
    }
    assert!((res.log_likelihood - (total / 3.0).ln()).abs() < 1e-12);
}

#[test]
fn objective_is_sum_of_unnormalised_log_weights() {
    let model = lorenz5(1);
    let tr = simulate(&model, 1, 2).unwrap();
    let mut tape = Tape::new();
    let cfg = FilterConfig::new(2).differentiable(true);
    let res = run_filter(&mut tape, &model, &model, Proposal::Bootstrap, &tr.observations, &cfg, 9).unwrap();
    let lw = tape.value(res.steps[0].log_weights);
    assert_eq!(tape.scalar(res.objective), lw[0] + lw[1]);
}

#[test]
fn state_estimate_matches_dot_products() {
    for seed in 0..10 {
        let mut r = rng::stream(seed, &[]);
        let (k, d) = (17, 4);
        let particles: Vec<f64> = (0..k * d).map(|_| r.random_range(-5.0..5.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let lw: Vec<f64> = raw.iter().map(|w| (w / total).ln()).collect();
        let est = estimate_state(&particles, &lw, d, Topology::Euclidean);
        for i in 0..d {
            let dot: f64 = (0..k).map(|j| raw[j] / total * particles[j * d + i]).sum();
            assert!((est[i] - dot).abs() < 1e-12);
        }
    }
}

#[test]
fn proposal_equal_to_transition_reduces_weights_to_likelihood() {
    for seed in 0..10 {
        let model = lorenz5(seed);
        let tr = simulate(&model, 20, seed).unwrap();
        let mut t1 = Tape::new();
        let three = run_filter(&mut t1, &model, &model, Proposal::Kernel(&model), &tr.observations, &FilterConfig::new(50), seed).unwrap();
        let mut t2 = Tape::new();
        let boot = run_filter(&mut t2, &model, &model, Proposal::Bootstrap, &tr.observations, &FilterConfig::new(50), seed).unwrap();
        for (a, b) in three.steps.iter().zip(&boot.steps) {
            assert_eq!(t1.value(a.particles), t2.value(b.particles));
            for (x, y) in t1.value(a.log_weights).iter().zip(t2.value(b.log_weights)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn resampling_and_objective_gradients_match_common_random_numbers() {
    for suite in gradcheck::check_filter(5).unwrap() {
        assert!(suite.passed, "{}: {:?}", suite.suite, suite.worst());
    }
}

#[test]
fn kuramoto_estimates_stay_on_the_circle() {
    let model = StateSpaceModel::new(ModelConfig::Kuramoto(KuramotoConfig { dim: 4, ..Default::default() }), 3).unwrap();
    let tr = simulate(&model, 15, 3).unwrap();
    let res = bootstrap_filter(&model, &tr.observations, 40, 1).unwrap();
    let pi = std::f64::consts::PI;
    assert!(res.means().iter().flatten().all(|v| (-pi..=pi).contains(v)));
}

#[test]
fn filter_csv_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let model = lorenz5(0);
    let tr = simulate(&model, 6, 0).unwrap();
    let res = bootstrap_filter(&model, &tr.observations, 10, 0).unwrap();
    let path = dir.path().join("filter.csv");
    res.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,mean_1,mean_2,mean_3,mean_4,mean_5,ess,step_loglik");
    assert_eq!(lines.count(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_are_normalised_and_ess_is_bounded(seed in 0u64..10_000, k in 1usize..40) {
        let model = lorenz5(seed);
        let tr = simulate(&model, 8, seed).unwrap();
        let mut tape = Tape::new();
        let res = run_filter(&mut tape, &model, &model, Proposal::Bootstrap, &tr.observations, &FilterConfig::new(k).differentiable(true), seed).unwrap();
        prop_assert_eq!(res.steps.len(), 8);
        for s in &res.steps {
            let lw = tape.value(s.log_norm_weights);
            let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lw.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() < 1e-9);
            prop_assert!(s.ess >= 1.0 - 1e-9 && s.ess <= k as f64 + 1e-9);
            prop_assert!(s.ancestors.iter().all(|a| *a < k));
        }
    }

    #[test]
    fn stop_gradient_filter_has_plain_primal(seed in 0u64..10_000) {
        let model = lorenz5(seed);
        let tr = simulate(&model, 6, seed).unwrap();
        let mut t1 = Tape::new();
        let a = run_filter(&mut t1, &model, &model, Proposal::Bootstrap, &tr.observations, &FilterConfig::new(20), seed).unwrap();
        let mut t2 = Tape::new();
        let b = run_filter(&mut t2, &model, &model, Proposal::Bootstrap, &tr.observations, &FilterConfig::new(20).differentiable(true), seed).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            prop_assert_eq!(t1.value(x.particles), t2.value(y.particles));
            prop_assert_eq!(t1.value(x.log_norm_weights), t2.value(y.log_norm_weights));
            prop_assert_eq!(&x.mean, &y.mean);
        }
        prop_assert_eq!(t1.scalar(a.objective), t2.scalar(b.objective));
    }
}

use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{Continuous, Normal};

use statemix::autodiff::Tape;
use statemix::rng;
use statemix::ssm::{
    kuramoto_order_params, kuramoto_step, lorenz96_step, simulate, KuramotoConfig, LinearGaussianConfig, Lorenz96Config, ModelConfig,
    StateSpaceModel, Trajectory,
};

#[test]
fn order_parameter_matches_complex_mean() {
    for seed in 0..20 {
        let mut r = rng::stream(seed, &[]);
        let theta: Vec<f64> = (0..20).map(|_| r.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
        let z: Complex64 = theta.iter().map(|t| Complex64::from_polar(1.0, *t)).sum::<Complex64>() / 20.0;
        let (rr, phi) = kuramoto_order_params(&theta);
        assert!((rr - z.norm()).abs() < 1e-12);
        assert!((phi - z.arg()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&rr));
    }
}

#[test]
fn kuramoto_step_matches_pairwise_coupling_loop() {
    // C R sin(phi - x_i) equals (C/N) sum_j sin(x_j - x_i)
    let mut r = rng::stream(3, &[]);
    let n = 7;
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let omega: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let (c, dt) = (0.8, 0.05);
    let got = kuramoto_step(&x, &omega, c, dt, &v).unwrap();
    for i in 0..n {
        let mut pull = 0.0;
        for xj in &x {
            pull += (xj - x[i]).sin();
        }
        let expect = x[i] + dt * (omega[i] + c * pull / n as f64) + dt.sqrt() * v[i];
        assert!((got[i] - expect).abs() < 1e-12, "oscillator {i}");
    }
}

#[test]
fn lorenz_step_matches_scalar_loop() {
    let mut r = rng::stream(4, &[]);
    let d = 9;
    let x: Vec<f64> = (0..d).map(|_| r.random_range(-5.0..5.0)).collect();
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let got = lorenz96_step(&x, 8.0, 0.05, &v).unwrap();
    for i in 0..d {
        let at = |k: isize| x[(i as isize + k).rem_euclid(d as isize) as usize];
        let expect = x[i] + 0.05 * ((at(1) - at(-2)) * at(-1) - x[i] + 8.0) + 0.05f64.sqrt() * v[i];
        assert!((got[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn lorenz_trajectory_stays_on_attractor_scale() {
    let model = StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config::default()), 0).unwrap();
    let tr = simulate(&model, 500, 1).unwrap();
    assert_eq!(tr.states.len(), 501);
    let max = tr.states.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 25.0, "max |x| = {max}");
}

#[test]
fn observation_density_matches_reference_gaussian() {
    for config in [
        ModelConfig::Lorenz96(Lorenz96Config { dim: 5, ..Default::default() }),
        ModelConfig::LinearGaussian(LinearGaussianConfig::default()),
    ] {
        let model = StateSpaceModel::new(config, 2).unwrap();
        let d = model.state_dim();
        let mut r = rng::stream(8, &[]);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let std = model.observation_std();
        let expect: f64 = x.iter().zip(&y).map(|(m, v)| Normal::new(*m, std).unwrap().ln_pdf(*v)).sum();
        assert!((model.observation_logpdf(&y, &x) - expect).abs() < 1e-12);

        let mut t = Tape::new();
        let xv = t.constant(x.clone(), 1, d);
        let ld = model.observation_log_density(&mut t, xv, &y).unwrap();
        assert!((t.scalar(ld) - expect).abs() < 1e-12);
    }
}

#[test]
fn kuramoto_states_and_observations_are_wrapped() {
    let cfg = KuramotoConfig { dim: 5, ..Default::default() };
    let model = StateSpaceModel::new(ModelConfig::Kuramoto(cfg), 6).unwrap();
    let tr = simulate(&model, 100, 6).unwrap();
    let pi = std::f64::consts::PI;
    for v in tr.states.iter().chain(&tr.observations).flatten() {
        assert!((-pi..pi).contains(v));
    }
}

#[test]
fn trajectory_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = StateSpaceModel::new(ModelConfig::Kuramoto(KuramotoConfig { dim: 3, ..Default::default() }), 12).unwrap();
    let tr = simulate(&model, 15, 4).unwrap();
    let (csv, side) = tr.save(dir.path(), "series").unwrap();
    let back = Trajectory::load(csv, side).unwrap();
    assert_eq!(back.states, tr.states);
    assert_eq!(back.observations, tr.observations);
    assert_eq!(back.series_hash(), tr.series_hash());
    assert_eq!(back.model().unwrap(), model);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lorenz_step_is_cyclic_shift_equivariant(
        x in proptest::collection::vec(-10.0f64..10.0, 4..12),
        shift in 0usize..12,
    ) {
        let d = x.len();
        let v = vec![0.0; d];
        let rot = |a: &[f64]| -> Vec<f64> { (0..d).map(|i| a[(i + shift) % d]).collect() };
        let a = rot(&lorenz96_step(&x, 8.0, 0.05, &v).unwrap());
        let b = lorenz96_step(&rot(&x), 8.0, 0.05, &v).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn order_parameter_is_bounded_and_rotation_covariant(
        theta in proptest::collection::vec(-3.14f64..3.14, 1..20),
        shift in -1.0f64..1.0,
    ) {
        let (r, phi) = kuramoto_order_params(&theta);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        let moved: Vec<f64> = theta.iter().map(|t| t + shift).collect();
        let (r2, phi2) = kuramoto_order_params(&moved);
        prop_assert!((r - r2).abs() < 1e-12);
        if r > 1e-6 {
            let dphi = (phi2 - phi - shift).rem_euclid(std::f64::consts::TAU);
            prop_assert!(dphi.min(std::f64::consts::TAU - dphi) < 1e-9);
        }
    }

    #[test]
    fn simulation_is_reproducible(seed in 0u64..10_000) {
        let model = StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 5, ..Default::default() }), seed).unwrap();
        let a = simulate(&model, 10, seed).unwrap();
        let b = simulate(&model, 10, seed).unwrap();
        prop_assert_eq!(a.series_hash(), b.series_hash());
        prop_assert_eq!(a.observations.len(), 10);
    }
}

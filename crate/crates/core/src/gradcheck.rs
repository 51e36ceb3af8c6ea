//! Finite-difference verification of reverse-mode gradients.
//!
//! Every check builds a scalar function of a flat parameter vector on a
//! fresh tape, differentiates it, and compares against central differences.
//! Stop-gradient values recorded at the base point are frozen for the
//! perturbed evaluations, and random draws come from fixed substreams, so
//! stochastic graphs are compared under common random numbers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{GaussianMixture, MixtureDraws, Sampler};
use crate::error::Result;
use crate::filter::{run_filter, FilterConfig, NetworkKernel, Proposal};
use crate::neuralnet::{Architecture, NetworkParams};
use crate::rng::{self, StreamRng};
use crate::ssm::{simulate, Lorenz96Config, ModelConfig, StateSpaceModel};

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const FILTER_TOLERANCE: f64 = 1e-3;
pub const RESAMPLING_TOLERANCE: f64 = FILTER_TOLERANCE;

/// Denominator floor for the resampling pre-weights. With one dominant
/// particle the pre-weight root is a difference of log-weights near 1e-12 and
/// central differences resolve its gradient only to about 1e-9.
/// Relative disagreement of one-sided differences treated as a jump.
pub const JUMP: f64 = 0.5;

pub const PREWEIGHT_FLOOR: f64 = 1e-4;

/// `|a - n|_inf / max(|a|_inf, |n|_inf, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

/// `|a - n|_inf / max(|a|_inf, |n|_inf, floor)`.
pub fn relative_error_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(floor)
}

/// Builds a scalar root from a parameter vector, returning the root and the
/// leaves whose concatenated gradients correspond to the vector.
pub type Builder<'a> = dyn Fn(&mut Tape, &[f64]) -> Result<(Var, Vec<Var>)> + 'a;

/// Analytic and central-difference gradients of `build` at `x0`.
pub fn compare(build: &Builder<'_>, x0: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let (root, leaves) = build(&mut tape, x0)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|v| grads.wrt(*v)).collect();
    let frozen = tape.stop_values().to_vec();

    let eval = |x: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        t.freeze_stops(frozen.clone());
        let (r, _) = build(&mut t, x)?;
        Ok(t.scalar(r))
    };
    let mut numeric = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = eval(&x)?;
        x[i] = x0[i] - h;
        let down = eval(&x)?;
        x[i] = x0[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok((analytic, numeric))
}

/// Like [`compare`], but drops coordinates where a discrete choice
/// (resampled ancestor, hard mixture component) flips inside `[x - h, x + h]`.
/// A flip shows up as one-sided differences that disagree by more than
/// `jump` relative to their size. Returns the kept pairs and the number of
/// dropped coordinates.
pub fn compare_piecewise(build: &Builder<'_>, x0: &[f64], h: f64, jump: f64) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (analytic, numeric) = compare(build, x0, h)?;
    let mut tape = Tape::new();
    let (root, _) = build(&mut tape, x0)?;
    let base = tape.scalar(root);
    let frozen = tape.stop_values().to_vec();
    let eval = |x: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        t.freeze_stops(frozen.clone());
        let (r, _) = build(&mut t, x)?;
        Ok(t.scalar(r))
    };
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fwd = (eval(&x)? - base) / h;
        x[i] = x0[i] - h;
        let bwd = (base - eval(&x)?) / h;
        x[i] = x0[i];
        if (fwd - bwd).abs() <= jump * fwd.abs().max(bwd.abs()).max(1.0) {
            a.push(analytic[i]);
            n.push(numeric[i]);
        }
    }
    let dropped = x0.len() - a.len();
    Ok((a, n, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(suite: &str, tolerance: f64, cases: Vec<CaseResult>) -> Self {
        let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        let passed = !cases.is_empty() && cases.iter().all(|c| c.rel_error < tolerance);
        SuiteReport {
            suite: suite.to_string(),
            tolerance,
            cases,
            max_rel_error,
            passed,
        }
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn case(name: &str, build: &Builder<'_>, x0: &[f64]) -> Result<CaseResult> {
    let (a, n) = compare(build, x0, FD_STEP)?;
    Ok(CaseResult {
        name: name.to_string(),
        rel_error: relative_error(&a, &n),
    })
}

// Contracts a Var against fixed pseudo-random weights so every output
// entry contributes to the scalar root.
fn contract(tape: &mut Tape, v: Var) -> Result<Var> {
    let w: Vec<f64> = (0..v.len()).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let wv = tape.constant(w, v.rows(), v.cols());
    let p = tape.mul(v, wv)?;
    Ok(tape.sum(p))
}

type Prim = fn(&mut Tape, Var) -> Result<Var>;

fn half(tape: &mut Tape, x: Var, second: bool) -> Result<Var> {
    let n = x.len() / 2;
    let start = if second { n } else { 0 };
    tape.gather(x, (start..start + n).collect(), 2, n / 2)
}

fn primitives() -> Vec<(&'static str, Prim, fn(&mut StreamRng) -> f64)> {
    fn any(r: &mut StreamRng) -> f64 {
        r.random_range(-2.0..2.0)
    }
    fn positive(r: &mut StreamRng) -> f64 {
        r.random_range(0.5..2.5)
    }
    fn away_from_zero(r: &mut StreamRng) -> f64 {
        let v: f64 = r.random_range(0.2..2.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    }
    vec![
        ("add", |t, x| {
            let (a, b) = (half(t, x, false)?, half(t, x, true)?);
            t.add(a, b)
        }, any),
        ("sub", |t, x| {
            let (a, b) = (half(t, x, false)?, half(t, x, true)?);
            t.sub(a, b)
        }, any),
        ("mul", |t, x| {
            let (a, b) = (half(t, x, false)?, half(t, x, true)?);
            t.mul(a, b)
        }, any),
        ("div", |t, x| {
            let (a, b) = (half(t, x, false)?, half(t, x, true)?);
            t.div(a, b)
        }, positive),
        ("neg", |t, x| Ok(t.neg(x)), any),
        ("exp", |t, x| Ok(t.exp(x)), any),
        ("log", |t, x| Ok(t.log(x)), positive),
        ("square", |t, x| Ok(t.square(x)), any),
        ("sqrt", |t, x| Ok(t.sqrt(x)), positive),
        ("sin", |t, x| Ok(t.sin(x)), any),
        ("cos", |t, x| Ok(t.cos(x)), any),
        ("abs", |t, x| Ok(t.abs(x)), away_from_zero),
        ("relu", |t, x| Ok(t.relu(x)), away_from_zero),
        ("clamp_min", |t, x| Ok(t.clamp_min(x, 0.1)), away_from_zero),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), any),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.4)), any),
        ("add_const", |t, x| {
            let offset: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
            t.add_const(x, &offset)
        }, any),
        ("batch_matvec", |t, x| {
            // 2x3 weight, 2x3 input
            let w = t.gather(x, (0..6).collect(), 2, 3)?;
            let z = t.gather(x, (6..12).collect(), 2, 3)?;
            t.batch_matvec(w, z)
        }, any),
        ("matvec", |t, x| {
            let w = t.gather(x, (0..6).collect(), 3, 2)?;
            let z = t.gather(x, (6..8).collect(), 1, 2)?;
            t.matvec(w, z)
        }, any),
        ("add_bias", |t, x| {
            let a = t.gather(x, (0..6).collect(), 3, 2)?;
            let b = t.gather(x, (6..8).collect(), 1, 2)?;
            t.add_bias(a, b)
        }, any),
        ("sum", |t, x| Ok(t.sum(x)), any),
        ("sum_rows", |t, x| {
            let m = t.reshape(x, 3, 4)?;
            Ok(t.sum_rows(m))
        }, any),
        ("concat", |t, x| {
            let (a, b) = (half(t, x, false)?, half(t, x, true)?);
            let s = t.sin(b);
            t.concat(&[s, a])
        }, any),
        ("concat_cols", |t, x| {
            let (a, b) = (half(t, x, false)?, half(t, x, true)?);
            let s = t.square(a);
            t.concat_cols(s, b)
        }, any),
        ("gather", |t, x| t.gather(x, vec![3, 3, 0, 11, 5], 1, 5), any),
        ("gather_rows", |t, x| {
            let m = t.reshape(x, 4, 3)?;
            t.gather_rows(m, &[2, 0, 2])
        }, any),
        ("softmax", |t, x| t.softmax(x), any),
        ("softmax_rows", |t, x| {
            let m = t.reshape(x, 3, 4)?;
            t.softmax_rows(m)
        }, any),
        ("logsumexp", |t, x| t.logsumexp(x), any),
        ("logsumexp_rows", |t, x| {
            let m = t.reshape(x, 4, 3)?;
            t.logsumexp_rows(m)
        }, any),
        ("stop_gradient", |t, x| {
            let s = t.stop_gradient(x);
            let p = t.mul(x, s)?;
            Ok(t.sin(p))
        }, any),
        ("reshape", |t, x| {
            let m = t.reshape(x, 6, 2)?;
            let e = t.exp(m);
            t.reshape(e, 2, 6)
        }, any),
    ]
}

/// Every tape primitive, each on a 12-entry input.
pub fn check_primitives(seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for (i, (name, op, draw)) in primitives().into_iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::label("primitives"), i as u64]);
        let x0: Vec<f64> = (0..12).map(|_| draw(&mut r)).collect();
        let build = move |t: &mut Tape, x: &[f64]| -> Result<(Var, Vec<Var>)> {
            let leaf = t.leaf(x.to_vec(), 1, x.len());
            let out = op(t, leaf)?;
            Ok((contract(t, out)?, vec![leaf]))
        };
        cases.push(case(name, &build, &x0)?);
    }
    Ok(SuiteReport::new("primitives", PRIMITIVE_TOLERANCE, cases))
}

#[derive(Debug, Clone, Copy)]
enum GraphOp {
    Sin,
    Cos,
    ExpSin,
    LogSquarePlusOne,
    SqrtSquarePlusOne,
    Mul,
    Add,
    Sub,
    SafeDiv,
    Scale(f64),
    Softmax,
    LogSumExpBroadcast,
    Linear(u64),
    Permute(u64),
}

const GRAPH_OPS: usize = 14;

fn random_op(r: &mut StreamRng) -> GraphOp {
    match r.random_range(0..GRAPH_OPS) {
        0 => GraphOp::Sin,
        1 => GraphOp::Cos,
        2 => GraphOp::ExpSin,
        3 => GraphOp::LogSquarePlusOne,
        4 => GraphOp::SqrtSquarePlusOne,
        5 => GraphOp::Mul,
        6 => GraphOp::Add,
        7 => GraphOp::Sub,
        8 => GraphOp::SafeDiv,
        9 => GraphOp::Scale(r.random_range(-2.0..2.0)),
        10 => GraphOp::Softmax,
        11 => GraphOp::LogSumExpBroadcast,
        12 => GraphOp::Linear(r.random()),
        _ => GraphOp::Permute(r.random()),
    }
}

fn apply(t: &mut Tape, op: GraphOp, a: Var, b: Var) -> Result<Var> {
    let d = a.len();
    Ok(match op {
        GraphOp::Sin => t.sin(a),
        GraphOp::Cos => t.cos(a),
        GraphOp::ExpSin => {
            let s = t.sin(a);
            t.exp(s)
        }
        GraphOp::LogSquarePlusOne => {
            let s = t.square(a);
            let s = t.add_scalar(s, 1.0);
            t.log(s)
        }
        GraphOp::SqrtSquarePlusOne => {
            let s = t.square(a);
            let s = t.add_scalar(s, 1.0);
            t.sqrt(s)
        }
        GraphOp::Mul => t.mul(a, b)?,
        GraphOp::Add => t.add(a, b)?,
        GraphOp::Sub => t.sub(a, b)?,
        GraphOp::SafeDiv => {
            let s = t.square(b);
            let s = t.add_scalar(s, 1.0);
            t.div(a, s)?
        }
        GraphOp::Scale(c) => t.scale(a, c),
        GraphOp::Softmax => t.softmax(a)?,
        GraphOp::LogSumExpBroadcast => {
            let l = t.logsumexp(a)?;
            let rep = t.gather(l, vec![0; d], 1, d)?;
            t.sub(a, rep)?
        }
        GraphOp::Linear(s) => {
            let mut r = rng::stream(s, &[]);
            let scale = 1.0 / (d as f64).sqrt();
            let w: Vec<f64> = (0..d * d).map(|_| r.random_range(-scale..scale)).collect();
            let wv = t.constant(w, d, d);
            t.batch_matvec(wv, a)?
        }
        GraphOp::Permute(s) => {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut rng::stream(s, &[]));
            t.gather(a, idx, 1, d)?
        }
    })
}

/// Random compositions of smooth primitives over vectors of length <= 8.
pub fn check_random_graphs(count: usize, seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::with_capacity(count);
    for g in 0..count {
        let mut r = rng::stream(seed, &[rng::label("graphs"), g as u64]);
        let d = r.random_range(1..=8);
        let depth = r.random_range(3..=10);
        let plan: Vec<(GraphOp, usize, usize)> = (0..depth)
            .map(|k| {
                let op = random_op(&mut r);
                // operands index into [leaf_a, leaf_b, node_0, ..., node_{k-1}]
                (op, r.random_range(0..k + 2), r.random_range(0..k + 2))
            })
            .collect();
        let x0: Vec<f64> = (0..2 * d).map(|_| r.random_range(-1.5..1.5)).collect();
        let build = move |t: &mut Tape, x: &[f64]| -> Result<(Var, Vec<Var>)> {
            let a = t.leaf(x[..d].to_vec(), 1, d);
            let b = t.leaf(x[d..].to_vec(), 1, d);
            let mut pool = vec![a, b];
            for &(op, i, j) in &plan {
                let v = apply(t, op, pool[i], pool[j])?;
                pool.push(v);
            }
            let last = *pool.last().expect("non-empty pool");
            let tail = t.sin(pool[pool.len() / 2]);
            let mixed = t.add(last, tail)?;
            Ok((contract(t, mixed)?, vec![a, b]))
        };
        cases.push(case(&format!("graph{g:03}"), &build, &x0)?);
    }
    Ok(SuiteReport::new("random_graphs", PRIMITIVE_TOLERANCE, cases))
}

fn unflatten(template: &NetworkParams, x: &[f64]) -> NetworkParams {
    let mut p = template.clone();
    let mut offset = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&x[offset..offset + n]);
        offset += n;
    }
    p
}

fn flatten(p: &NetworkParams) -> Vec<f64> {
    p.tensors().concat()
}

/// Small Lorenz 96 problem with 2-layer transition and proposal networks.
pub struct FilterProblem {
    pub model: StateSpaceModel,
    pub ys: Vec<Vec<f64>>,
    pub transition: NetworkParams,
    pub proposal: NetworkParams,
    pub components: usize,
}

impl FilterProblem {
    pub fn new(seed: u64, steps: usize, components: usize) -> Result<Self> {
        let model = StateSpaceModel::new(ModelConfig::Lorenz96(Lorenz96Config { dim: 4, ..Default::default() }), seed)?;
        let ys = simulate(&model, steps, seed)?.observations;
        let mut r = rng::stream(seed, &[rng::label("gradcheck-init")]);
        let transition = NetworkParams::for_architecture(&Architecture::transition(4, &[8], components), &mut r)?;
        let proposal = NetworkParams::for_architecture(&Architecture::proposal(4, 4, &[8], components), &mut r)?;
        Ok(FilterProblem {
            model,
            ys,
            transition,
            proposal,
            components,
        })
    }

    pub fn parameters(&self) -> Vec<f64> {
        [flatten(&self.transition), flatten(&self.proposal)].concat()
    }

    /// Runs the differentiable filter with both networks as leaves.
    pub fn run(&self, tape: &mut Tape, x: &[f64], particles: usize, sampler: Sampler, key: u64) -> Result<(crate::filter::FilterResult, Vec<Var>)> {
        let nf = self.transition.param_count();
        let f = unflatten(&self.transition, &x[..nf]).bind(tape, true);
        let p = unflatten(&self.proposal, &x[nf..]).bind(tape, true);
        let leaves = [f.vars(), p.vars()].concat();
        let top = self.model.topology();
        let fk = NetworkKernel::transition(f, self.components, 4, top)?;
        let pk = NetworkKernel::proposal(p, self.components, 4, 4, top)?;
        let cfg = FilterConfig::new(particles).differentiable(true).with_sampler(sampler);
        let res = run_filter(tape, &self.model, &fk, Proposal::Kernel(&pk), &self.ys, &cfg, key)?;
        Ok((res, leaves))
    }
}

// More than a quarter of coordinates dropped means the check says little.
fn piecewise_case(name: &str, build: &Builder<'_>, x0: &[f64], floor: f64) -> Result<CaseResult> {
    let (a, n, dropped) = compare_piecewise(build, x0, FD_STEP, JUMP)?;
    let rel_error = if dropped * 4 > x0.len() { f64::INFINITY } else { relative_error_floored(&a, &n, floor) };
    Ok(CaseResult {
        name: format!("{name} ({dropped} of {} coords dropped)", x0.len()),
        rel_error,
    })
}

/// Filter objective (T=3, K=4) w.r.t. both networks, plus the summed
/// resampling log pre-weights (T=2, K=4).
pub fn check_filter(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut objective_cases = Vec::new();
    let mut resampling_cases = Vec::new();
    for (i, (components, sampler)) in [(1, Sampler::StopGradient), (2, Sampler::StopGradient), (2, Sampler::gumbel())].into_iter().enumerate() {
        let problem = FilterProblem::new(seed + i as u64, 3, components)?;
        let key = rng::derive_key(seed, &[rng::label("gradcheck-filter"), i as u64]);
        let x0 = problem.parameters();
        let objective = |t: &mut Tape, x: &[f64]| -> Result<(Var, Vec<Var>)> {
            let (res, leaves) = problem.run(t, x, 4, sampler, key)?;
            Ok((res.objective, leaves))
        };
        let name = format!("objective_S{components}_{}", if matches!(sampler, Sampler::StopGradient) { "stopgrad" } else { "gumbel" });
        objective_cases.push(piecewise_case(&name, &objective, &x0, 1e-8)?);

        let short = FilterProblem::new(seed + i as u64, 2, components)?;
        let pre_weights = |t: &mut Tape, x: &[f64]| -> Result<(Var, Vec<Var>)> {
            let (res, leaves) = short.run(t, x, 4, sampler, key)?;
            let prev = res.steps[0].log_norm_weights;
            let sel = t.gather_rows(prev, &res.steps[1].ancestors)?;
            let st = t.stop_gradient(sel);
            let diff = t.sub(sel, st)?;
            let s = t.sum(diff);
            Ok((t.add_scalar(s, -4.0 * 4f64.ln()), leaves))
        };
        resampling_cases.push(piecewise_case(&format!("preweights_{name}"), &pre_weights, &short.parameters(), PREWEIGHT_FLOOR)?);
    }
    Ok(vec![
        SuiteReport::new("filter_objective", FILTER_TOLERANCE, objective_cases),
        SuiteReport::new("resampling_preweights", RESAMPLING_TOLERANCE, resampling_cases),
    ])
}

/// Mixture log-density and reparameterised sample gradients.
pub fn check_mixture(seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for (i, (s, d, sampler)) in [(1, 3, Sampler::StopGradient), (3, 2, Sampler::StopGradient), (3, 2, Sampler::gumbel())].into_iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::label("mixture"), i as u64]);
        let n = 2;
        let means: Vec<f64> = (0..n * s * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let scales: Vec<f64> = (0..n * s * d).map(|_| r.random_range(0.5..1.5)).collect();
        let x: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let draws = MixtureDraws::generate(&mut r, n, s, d, sampler);
        let x0 = [means, scales, x].concat();
        let (m_len, x_len) = (n * s * d, n * d);
        let density = |t: &mut Tape, p: &[f64]| -> Result<(Var, Vec<Var>)> {
            let mu = t.leaf(p[..m_len].to_vec(), n * s, d);
            let c = t.leaf(p[m_len..2 * m_len].to_vec(), n * s, d);
            let xv = t.leaf(p[2 * m_len..2 * m_len + x_len].to_vec(), n, d);
            let mix = GaussianMixture::new(t, mu, c, n, s)?;
            let ld = mix.log_density(t, xv)?;
            let sample = mix.sample(t, &draws, sampler)?;
            let sv = contract(t, sample)?;
            let total = t.sum(ld);
            Ok((t.add(total, sv)?, vec![mu, c, xv]))
        };
        cases.push(case(&format!("mixture_S{s}_d{d}_{i}"), &density, &x0)?);
    }
    Ok(SuiteReport::new("mixture", PRIMITIVE_TOLERANCE, cases))
}

/// All suites with their default sizes.
pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    let mut suites = vec![check_primitives(seed)?, check_random_graphs(100, seed)?, check_mixture(seed)?];
    suites.extend(check_filter(seed)?);
    Ok(GradcheckReport { suites })
}

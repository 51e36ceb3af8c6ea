//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every value on a [`Tape`] is a row-major `rows x cols` array. Operations
//! append a node holding the primal result plus whatever the adjoint rule
//! needs; [`Tape::backward`] walks the nodes once in reverse order. Parents
//! always have smaller ids than children, so the append order is already a
//! topological order.
//!
//! The operator set is deliberately small: it is exactly what the particle
//! filter, the mixture densities and the dense networks are built from.
//! Particle batches are represented as `K x d` matrices so that one node
//! covers all particles.
//!
//! ```
//! use statemix::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(vec![1.0, 2.0], 1, 2);
//! let frozen = tape.stop_gradient(x);
//! let y = tape.mul(frozen, x).unwrap();
//! let s = tape.sum(y);
//! let grads = tape.backward(s).unwrap();
//! // d/dx [stop(x) * x] = x, not 2x
//! assert_eq!(grads.wrt(x), vec![1.0, 2.0]);
//! ```

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy; the value lives on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Scale(usize, f64),
    Shift(usize),
    BatchMatVec { weight: usize, input: usize },
    AddBias { input: usize, bias: usize },
    Sum(usize),
    SumRows(usize),
    Concat(Vec<usize>),
    ConcatCols(usize, usize),
    Gather { src: usize, index: Vec<usize> },
    Softmax(usize),
    SoftmaxRows(usize),
    LogSumExp(usize),
    LogSumExpRows(usize),
    StopGradient(usize),
    Reshape(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Leaves created with [`Tape::leaf`] receive gradients; constants created
/// with [`Tape::constant`] never do, and neither does anything computed only
/// from constants. The backward pass skips those nodes entirely.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    stops_seen: Vec<Vec<f64>>,
    frozen_stops: Option<Vec<Vec<f64>>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Adjoint of the root with respect to `var`; zeros if the root does not
    /// depend on it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match &self.adjoints[var.id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[var.id]],
        }
    }

    /// Borrowing variant of [`Gradients::wrt`]; `None` means structurally zero.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.adjoints[var.id].as_deref()
    }
}

fn same_shape(op: &'static str, a: Var, b: Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    Ok(())
}

fn log_sum_exp_slice(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp_slice(x);
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - lse).exp();
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.id].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.id].value[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    /// Parent ids of a node, in the order the operation received them.
    pub fn parents(&self, var: Var) -> Vec<usize> {
        use Op::*;
        match &self.nodes[var.id].op {
            Leaf | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ConcatCols(a, b) => vec![*a, *b],
            BatchMatVec { weight, input } => vec![*weight, *input],
            AddBias { input, bias } => vec![*input, *bias],
            Concat(ids) => ids.clone(),
            Gather { src, .. } => vec![*src],
            Neg(a) | Exp(a) | Log(a) | Square(a) | Sqrt(a) | Sin(a) | Cos(a) | Abs(a)
            | Relu(a) | ClampMin(a, _) | Scale(a, _) | Shift(a) | Sum(a) | SumRows(a)
            | Softmax(a) | SoftmaxRows(a) | LogSumExp(a) | LogSumExpRows(a)
            | StopGradient(a) | Reshape(a) => vec![*a],
        }
    }

    fn push(&mut self, op: Op, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            rows,
            cols,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf value length must be rows*cols");
        self.push(Op::Leaf, value, rows, cols, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "constant value length must be rows*cols");
        self.push(Op::Const, value, rows, cols, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value], 1, 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        same_shape(name, a, b)?;
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let value = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op(a.id, b.id), value, a.rows, a.cols, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.id].value.iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(op, value, a.rows, a.cols, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.id), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.id), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.id), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.id), f64::sqrt)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a.id), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a.id), f64::cos)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.id), f64::abs)
    }

    /// `max(0, x)`; the derivative at the kink is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, floor)`; zero derivative wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a.id, floor), |x| if x > floor { x } else { floor })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a.id, factor), |x| x * factor)
    }

    /// Adds a fixed array (no gradient towards the offset).
    pub fn add_const(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        if offset.len() != a.len() {
            return Err(Error::shape("add_const", a.len(), offset.len()));
        }
        let value = self.nodes[a.id]
            .value
            .iter()
            .zip(offset)
            .map(|(x, o)| x + o)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Shift(a.id), value, a.rows, a.cols, rg))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, Op::Shift(a.id), |x| x + offset)
    }

    /// Row-wise matrix-vector product: each row `x_r` of `input` (`n x k`)
    /// maps to `weight * x_r` where `weight` is `m x k`. Output is `n x m`.
    pub fn batch_matvec(&mut self, weight: Var, input: Var) -> Result<Var> {
        if weight.cols != input.cols {
            return Err(Error::shape(
                "batch_matvec",
                format!("input with {} columns", weight.cols),
                format!("{}x{}", input.rows, input.cols),
            ));
        }
        let (m, k, n) = (weight.rows, weight.cols, input.rows);
        let w = &self.nodes[weight.id].value;
        let x = &self.nodes[input.id].value;
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let xr = &x[r * k..(r + 1) * k];
            let orow = &mut out[r * m..(r + 1) * m];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wo = &w[o * k..(o + 1) * k];
                *slot = wo.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(weight) || self.rg(input);
        Ok(self.push(
            Op::BatchMatVec {
                weight: weight.id,
                input: input.id,
            },
            out,
            n,
            m,
            rg,
        ))
    }

    /// Plain matrix-vector product `a * x` with `x` a vector of length `a.cols`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        if x.len() != a.cols {
            return Err(Error::shape("matvec", a.cols, x.len()));
        }
        let row = self.reshape(x, 1, a.cols)?;
        self.batch_matvec(a, row)
    }

    /// Adds the `1 x m` vector `bias` to every row of the `n x m` `input`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        if bias.len() != input.cols {
            return Err(Error::shape("add_bias", input.cols, bias.len()));
        }
        let m = input.cols;
        let b = &self.nodes[bias.id].value;
        let value = self.nodes[input.id]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % m])
            .collect();
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(
            Op::AddBias {
                input: input.id,
                bias: bias.id,
            },
            value,
            input.rows,
            input.cols,
            rg,
        ))
    }

    /// Sum of all entries, as a `1x1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a.id), vec![s], 1, 1, rg)
    }

    /// Per-row sums of an `n x m` array, as an `n x 1` node.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let value = (0..a.rows)
            .map(|r| v[r * a.cols..(r + 1) * a.cols].iter().sum())
            .collect();
        let rg = self.rg(a);
        self.push(Op::SumRows(a.id), value, a.rows, 1, rg)
    }

    /// Flat concatenation into a `1 x total` vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "no inputs"));
        }
        let mut value = Vec::with_capacity(parts.iter().map(Var::len).sum());
        for p in parts {
            value.extend_from_slice(&self.nodes[p.id].value);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let n = value.len();
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), value, 1, n, rg))
    }

    /// Side-by-side concatenation of `n x p` and `n x q` into `n x (p+q)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows {
            return Err(Error::shape("concat_cols", a.rows, b.rows));
        }
        let (p, q) = (a.cols, b.cols);
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let mut value = Vec::with_capacity(a.rows * (p + q));
        for r in 0..a.rows {
            value.extend_from_slice(&va[r * p..(r + 1) * p]);
            value.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a.id, b.id), value, a.rows, p + q, rg))
    }

    /// `out[i] = src[index[i]]` over the flattened source, shaped `rows x cols`.
    /// Repeated indices are allowed; their adjoints add up.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::shape("gather", rows * cols, index.len()));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract(
                "gather",
                format!("index {bad} out of range for {} entries", src.len()),
            ));
        }
        let v = &self.nodes[src.id].value;
        let value = index.iter().map(|&i| v[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(Op::Gather { src: src.id, index }, value, rows, cols, rg))
    }

    /// Selects whole rows of an `n x m` array.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let m = src.cols;
        let index = rows
            .iter()
            .flat_map(|&r| (r * m)..(r * m + m))
            .collect::<Vec<_>>();
        self.gather(src, index, rows.len(), m)
    }

    /// Softmax over all entries.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if a.is_empty() {
            return Err(Error::contract("softmax", "empty input"));
        }
        let mut out = vec![0.0; a.len()];
        softmax_slice(&self.nodes[a.id].value, &mut out);
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a.id), out, a.rows, a.cols, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if a.cols == 0 {
            return Err(Error::contract("softmax_rows", "empty rows"));
        }
        let mut out = vec![0.0; a.len()];
        let v = &self.nodes[a.id].value;
        for r in 0..a.rows {
            softmax_slice(
                &v[r * a.cols..(r + 1) * a.cols],
                &mut out[r * a.cols..(r + 1) * a.cols],
            );
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a.id), out, a.rows, a.cols, rg))
    }

    /// `max(x) + log(sum(exp(x - max(x))))` over all entries; adjoint is softmax.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        if a.is_empty() {
            return Err(Error::contract("logsumexp", "empty input"));
        }
        let v = log_sum_exp_slice(&self.nodes[a.id].value);
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExp(a.id), vec![v], 1, 1, rg))
    }

    /// Row-wise logsumexp of an `n x m` array, as an `n x 1` node.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        if a.cols == 0 {
            return Err(Error::contract("logsumexp_rows", "empty rows"));
        }
        let v = &self.nodes[a.id].value;
        let value = (0..a.rows)
            .map(|r| log_sum_exp_slice(&v[r * a.cols..(r + 1) * a.cols]))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExpRows(a.id), value, a.rows, 1, rg))
    }

    /// Identity on the value, zero adjoint through this edge.
    ///
    /// When the tape has frozen stop values (see [`Tape::freeze_stops`]) the
    /// n-th call returns the n-th frozen array instead of the input value.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let n = self.stops_seen.len();
        let value = match &self.frozen_stops {
            Some(frozen) if n < frozen.len() && frozen[n].len() == a.len() => frozen[n].clone(),
            _ => self.nodes[a.id].value.clone(),
        };
        self.stops_seen.push(value.clone());
        self.push(Op::StopGradient(a.id), value, a.rows, a.cols, false)
    }

    /// Replays stop-gradient nodes with previously recorded values.
    ///
    /// Used for common-random-number finite differences: the primal of the
    /// replayed computation, as a function of its leaves, has ordinary
    /// derivatives equal to the stop-gradient adjoints at the recording point.
    pub fn freeze_stops(&mut self, values: Vec<Vec<f64>>) {
        self.frozen_stops = Some(values);
    }

    /// Values produced by every `stop_gradient` call so far, in call order.
    pub fn stop_values(&self) -> &[Vec<f64>] {
        &self.stops_seen
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != a.len() {
            return Err(Error::shape("reshape", a.len(), rows * cols));
        }
        let value = self.nodes[a.id].value.clone();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a.id), value, rows, cols, rg))
    }

    /// Reverse sweep from a scalar root. Every node is visited at most once,
    /// in decreasing id order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::NonScalarRoot {
                rows: root.rows,
                cols: root.cols,
            });
        }
        let n = root.id + 1;
        let lens: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.id].requires_grad {
            adj[root.id] = Some(vec![1.0]);
        }

        for id in (0..n).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj, &lens);
            }
            adj[id] = Some(g);
        }
        Ok(Gradients { adjoints: adj, lens })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>], lens: &[usize]) {
        use Op::*;
        let val = |id: usize| -> &[f64] { &self.nodes[id].value };
        let wants = |id: usize| self.nodes[id].requires_grad;
        // Accumulate `f(i)` into the adjoint of parent `p` if it needs one.
        let mut acc = |p: usize, f: &dyn Fn(usize) -> f64| {
            if wants(p) {
                accumulate(&mut adj[p], lens[p], |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += f(i);
                    }
                });
            }
        };
        match &node.op {
            Leaf | Const | StopGradient(_) => {}
            Add(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| g[i]);
            }
            Sub(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| -g[i]);
            }
            Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] * vb[i]);
                acc(*b, &|i| g[i] * va[i]);
            }
            Div(a, b) => {
                let vb = val(*b);
                let out = &node.value;
                acc(*a, &|i| g[i] / vb[i]);
                acc(*b, &|i| -g[i] * out[i] / vb[i]);
            }
            Neg(a) => acc(*a, &|i| -g[i]),
            Exp(a) => {
                let out = &node.value;
                acc(*a, &|i| g[i] * out[i]);
            }
            Log(a) => {
                let va = val(*a);
                acc(*a, &|i| g[i] / va[i]);
            }
            Square(a) => {
                let va = val(*a);
                acc(*a, &|i| 2.0 * va[i] * g[i]);
            }
            Sqrt(a) => {
                let out = &node.value;
                acc(*a, &|i| g[i] / (2.0 * out[i]));
            }
            Sin(a) => {
                let va = val(*a);
                acc(*a, &|i| g[i] * va[i].cos());
            }
            Cos(a) => {
                let va = val(*a);
                acc(*a, &|i| -g[i] * va[i].sin());
            }
            Abs(a) => {
                let va = val(*a);
                acc(*a, &|i| {
                    if va[i] > 0.0 {
                        g[i]
                    } else if va[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                });
            }
            Relu(a) => {
                let va = val(*a);
                acc(*a, &|i| if va[i] > 0.0 { g[i] } else { 0.0 });
            }
            ClampMin(a, floor) => {
                let va = val(*a);
                acc(*a, &|i| if va[i] > *floor { g[i] } else { 0.0 });
            }
            Scale(a, s) => acc(*a, &|i| g[i] * s),
            Shift(a) | Reshape(a) => acc(*a, &|i| g[i]),
            BatchMatVec { weight, input } => {
                let w_node = &self.nodes[*weight];
                let (m, k) = (w_node.rows, w_node.cols);
                let n = node.rows;
                let w = &w_node.value;
                let x = val(*input);
                if wants(*weight) {
                    accumulate(&mut adj[*weight], lens[*weight], |gw| {
                        for r in 0..n {
                            let xr = &x[r * k..(r + 1) * k];
                            for o in 0..m {
                                let go = g[r * m + o];
                                if go != 0.0 {
                                    for (dst, xv) in gw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                        *dst += go * xv;
                                    }
                                }
                            }
                        }
                    });
                }
                if wants(*input) {
                    accumulate(&mut adj[*input], lens[*input], |gx| {
                        for r in 0..n {
                            let gxr = &mut gx[r * k..(r + 1) * k];
                            for o in 0..m {
                                let go = g[r * m + o];
                                if go != 0.0 {
                                    for (dst, wv) in gxr.iter_mut().zip(&w[o * k..(o + 1) * k]) {
                                        *dst += go * wv;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            AddBias { input, bias } => {
                acc(*input, &|i| g[i]);
                let m = node.cols;
                if wants(*bias) {
                    accumulate(&mut adj[*bias], lens[*bias], |gb| {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % m] += gi;
                        }
                    });
                }
            }
            Sum(a) => acc(*a, &|_| g[0]),
            SumRows(a) => {
                let m = self.nodes[*a].cols;
                acc(*a, &|i| g[i / m]);
            }
            Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = lens[p];
                    let o = offset;
                    acc(p, &|i| g[o + i]);
                    offset += len;
                }
            }
            ConcatCols(a, b) => {
                let p = self.nodes[*a].cols;
                let q = self.nodes[*b].cols;
                acc(*a, &|i| g[(i / p) * (p + q) + i % p]);
                acc(*b, &|i| g[(i / q) * (p + q) + p + i % q]);
            }
            Gather { src, index } => {
                if wants(*src) {
                    accumulate(&mut adj[*src], lens[*src], |gs| {
                        for (gi, &ix) in g.iter().zip(index) {
                            gs[ix] += gi;
                        }
                    });
                }
            }
            Softmax(a) => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*a, &|i| y[i] * (g[i] - dot));
            }
            SoftmaxRows(a) => {
                let y = &node.value;
                let m = node.cols;
                let dots: Vec<f64> = (0..node.rows)
                    .map(|r| {
                        g[r * m..(r + 1) * m]
                            .iter()
                            .zip(&y[r * m..(r + 1) * m])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                acc(*a, &|i| y[i] * (g[i] - dots[i / m]));
            }
            LogSumExp(a) => {
                let x = val(*a);
                let out = node.value[0];
                acc(*a, &|i| g[0] * (x[i] - out).exp());
            }
            LogSumExpRows(a) => {
                let x = val(*a);
                let m = self.nodes[*a].cols;
                let out = &node.value;
                acc(*a, &|i| g[i / m] * (x[i] - out[i / m]).exp());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn stop_gradient_keeps_value() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.5, -2.0, 3.25], 1, 3);
        let s = t.stop_gradient(x);
        assert_eq!(t.value(s), t.value(x));
        assert!(!t.requires_grad(s));
    }

    #[test]
    fn stop_gradient_product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.5, -3.0], 1, 2);
        let s = t.stop_gradient(x);
        let p = t.mul(s, x).unwrap();
        let root = t.sum(p);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(x), vec![0.5, -3.0]);
    }

    #[test]
    fn weight_transform_has_unit_value_and_reciprocal_gradient() {
        // f(w) = w / stop(w): value 1, derivative 1/w
        let w0 = 0.37;
        let mut t = Tape::new();
        let w = t.leaf(vec![w0], 1, 1);
        let s = t.stop_gradient(w);
        let f = t.div(w, s).unwrap();
        assert_eq!(t.scalar(f), 1.0);
        let g = t.backward(f).unwrap();
        assert!(close(g.wrt(w)[0], 1.0 / w0, 1e-15));

        // finite differences with the stop value frozen at w0
        let h = 1e-6;
        let eval = |w: f64| w / w0;
        let fd = (eval(w0 + h) - eval(w0 - h)) / (2.0 * h);
        assert!(((g.wrt(w)[0] - fd) / fd).abs() < 1e-8);
    }

    #[test]
    fn logsumexp_examples() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0, 0.0], 1, 2);
        let l = t.logsumexp(a).unwrap();
        assert!(close(t.scalar(l), std::f64::consts::LN_2, 1e-15));

        let b = t.constant(vec![-4.2], 1, 1);
        let l = t.logsumexp(b).unwrap();
        assert_eq!(t.scalar(l), -4.2);

        let c = t.constant(vec![1000.0, 1000.0], 1, 2);
        let l = t.logsumexp(c).unwrap();
        assert!(t.scalar(l).is_finite());
        assert!(close(t.scalar(l), 1000.0 + std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn logsumexp_rejects_empty() {
        let mut t = Tape::new();
        let e = t.constant(vec![], 1, 0);
        assert!(matches!(t.logsumexp(e), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_logsumexp_is_softmax() {
        let xs = vec![0.3, -1.2, 2.0, 0.0];
        let mut t = Tape::new();
        let x = t.leaf(xs.clone(), 1, 4);
        let l = t.logsumexp(x).unwrap();
        let g = t.backward(l).unwrap().wrt(x);
        let z: f64 = xs.iter().map(|v| v.exp()).sum();
        for (gi, xi) in g.iter().zip(&xs) {
            assert!(close(*gi, xi.exp() / z, 1e-15));
        }
    }

    #[test]
    fn backward_rejects_vector_root() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], 1, 2);
        assert!(matches!(
            t.backward(x),
            Err(Error::NonScalarRoot { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], 1, 1);
        let y = t.leaf(vec![2.0, 3.0], 1, 2);
        let root = t.square(x);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(y), vec![0.0, 0.0]);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 1.0, -1.0], 1, 3);
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_scatter_adds_repeated_indices() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], 1, 3);
        let g = t.gather(x, vec![0, 0, 2, 0], 1, 4).unwrap();
        assert_eq!(t.value(g), &[1.0, 1.0, 3.0, 1.0]);
        let s = t.sum(g);
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![3.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], 1, 2);
        assert!(t.gather(x, vec![2], 1, 1).is_err());
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], 1, 2);
        let y = t.exp(x);
        let z = t.mul(x, y).unwrap();
        let s = t.sum(z);
        for v in [y, z, s] {
            assert!(t.parents(v).iter().all(|&p| p < v.id()));
        }
    }

    #[test]
    fn constants_stay_off_the_gradient_path() {
        let mut t = Tape::new();
        let c = t.constant(vec![2.0], 1, 1);
        let x = t.leaf(vec![3.0], 1, 1);
        let cc = t.square(c);
        assert!(!t.requires_grad(cc));
        let p = t.mul(cc, x).unwrap();
        let g = t.backward(p).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x), vec![4.0]);
    }

    #[test]
    fn batch_matvec_matches_manual_product() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let x = t.leaf(vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5], 2, 3);
        let y = t.batch_matvec(w, x).unwrap();
        assert_eq!(y.shape(), (2, 2));
        assert_eq!(t.value(y), &[-2.0, -2.0, 5.5, 16.0]);
    }

    #[test]
    fn frozen_stops_replace_values() {
        let mut t = Tape::new();
        t.freeze_stops(vec![vec![10.0]]);
        let x = t.leaf(vec![1.0], 1, 1);
        let s = t.stop_gradient(x);
        assert_eq!(t.value(s), &[10.0]);
        assert_eq!(t.stop_values(), &[vec![10.0]]);
    }
}

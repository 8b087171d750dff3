//! Define-by-run reverse-mode differentiation over dense `f64` arrays of
//! rank at most two.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! parents already live at lower indices, so the arena order is a valid
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Binary elementwise operations broadcast a dimension of extent one against
//! the other operand (row vectors over matrices, scalars over anything).
//!
//! A graph built with [`Graph::no_grad`] evaluates exactly the same kernels
//! but keeps no parent links, so it cannot be differentiated. Policies use it
//! for the frozen reference so that reference and policy values agree
//! bitwise when their parameters agree.

use crate::error::{Error, Result, Shape};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Shape,
    data: Vec<f64>,
}

impl Array {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(rows, cols);
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "array",
                left: shape,
                right: Shape::new(1, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape::SCALAR,
            data: vec![value],
        }
    }

    /// `n x 1` column.
    pub fn column(data: Vec<f64>) -> Self {
        Self {
            shape: Shape::new(data.len(), 1),
            data,
        }
    }

    /// `1 x n` row.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: Shape::new(1, data.len()),
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape.cols + col]
    }

    /// Value of a scalar array (the first element otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    LogSoftmax(NodeId),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Neg(NodeId),
    Detach,
    Clamp(NodeId, f64, f64),
    FloorMagnitude(NodeId, f64),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Neg(..) => "neg",
            Op::Detach => "detach",
            Op::Clamp(..) => "clamp",
            Op::FloorMagnitude(..) => "floor_magnitude",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    detached: bool,
}

/// Arena of nodes for one forward pass.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Array>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records parents and supports [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A graph that only evaluates values.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn is_detached(&self, id: NodeId) -> bool {
        self.nodes[id.0].detached
    }

    /// Gradient of the last backward seed with respect to `id`. Zero before
    /// any backward pass and for nodes the seed does not depend on.
    pub fn grad(&self, id: NodeId) -> Array {
        self.grads
            .get(id.0)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.shape(id)))
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        let detached = matches!(op, Op::Detach);
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            detached,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input node (parameter or constant).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Array::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    /// Multiply by a plain constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = map(self.value(a), |x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Row-wise log-softmax (last axis), max-subtracted.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmax(a))
    }

    /// Picks `src` elements at row-major flat `indices` into a new array of
    /// `shape`. Repeated indices are allowed; their gradients accumulate.
    pub fn gather(&mut self, src: NodeId, indices: Vec<usize>, shape: Shape) -> Result<NodeId> {
        if indices.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: shape,
                right: Shape::new(1, indices.len()),
            });
        }
        let source = self.value(src).data();
        let mut data = Vec::with_capacity(indices.len());
        for &index in &indices {
            match source.get(index) {
                Some(&v) => data.push(v),
                None => {
                    return Err(Error::IndexOutOfRange {
                        index,
                        len: source.len(),
                    })
                }
            }
        }
        let value = Array { shape, data };
        Ok(self.push(value, Op::Gather(src, indices)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data.iter().sum();
        self.push(Array::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let total: f64 = v.data.iter().sum();
        let mean = total / v.data.len() as f64;
        self.push(Array::scalar(mean), Op::Mean(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`; `-ln sigmoid(u)` is `softplus(-u)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), |x| -x);
        self.push(value, Op::Neg(a))
    }

    /// Stop-gradient: same value, no gradient flows to `a` through this node.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside
    /// or on the bounds.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// `sign(x) * max(|x|, eps)` with `sign(0) = -1`.
    pub fn floor_magnitude(&mut self, a: NodeId, eps: f64) -> NodeId {
        let value = map(self.value(a), |x| floor_magnitude(x, eps));
        self.push(value, Op::FloorMagnitude(a, eps))
    }

    /// Reverse accumulation from a scalar seed. Any previous gradients are
    /// discarded.
    pub fn backward(&mut self, seed: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        let seed_shape = self.shape(seed);
        if !seed_shape.is_scalar() {
            return Err(Error::NonScalarSeed(seed_shape));
        }
        let mut grads: Vec<Array> = self
            .nodes
            .iter()
            .map(|n| Array::zeros(n.value.shape))
            .collect();
        grads[seed.0].data[0] = 1.0;

        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if node.detached {
                continue;
            }
            let (done, rest) = grads.split_at_mut(i);
            let g = &rest[0];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut done[a.0], g, |x| x);
                    accumulate_broadcast(&mut done[b.0], g, |x| x);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut done[a.0], g, |x| x);
                    accumulate_broadcast(&mut done[b.0], g, |x| -x);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = zip_broadcast("mul", g, bv, |x, y| x * y)?;
                    let gb = zip_broadcast("mul", g, av, |x, y| x * y)?;
                    accumulate_broadcast(&mut done[a.0], &ga, |x| x);
                    accumulate_broadcast(&mut done[b.0], &gb, |x| x);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let ga = zip_broadcast("div", g, bv, |x, y| x / y)?;
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_broadcast("div", out, bv, |x, y| x / y)?;
                    let gb = zip_broadcast("div", g, &q, |x, y| -x * y)?;
                    accumulate_broadcast(&mut done[a.0], &ga, |x| x);
                    accumulate_broadcast(&mut done[b.0], &gb, |x| x);
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate_broadcast(&mut done[a.0], g, |x| x * f);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    matmul_grad_lhs(&mut done[a.0], g, bv);
                    matmul_grad_rhs(&mut done[b.0], av, g);
                }
                Op::LogSoftmax(a) => {
                    let cols = out.shape.cols;
                    let ga = &mut done[a.0].data;
                    for r in 0..out.shape.rows {
                        let row = r * cols..(r + 1) * cols;
                        let gsum: f64 = g.data[row.clone()].iter().sum();
                        for k in row {
                            ga[k] += g.data[k] - out.data[k].exp() * gsum;
                        }
                    }
                }
                Op::Gather(src, indices) => {
                    let gs = &mut done[src.0].data;
                    for (k, &index) in indices.iter().enumerate() {
                        gs[index] += g.data[k];
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data[0];
                    for x in done[a.0].data.iter_mut() {
                        *x += gv;
                    }
                }
                Op::Mean(a) => {
                    let ga = &mut done[a.0].data;
                    let gv = g.data[0] / ga.len() as f64;
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = &mut done[a.0].data;
                    for (k, y) in out.data.iter().enumerate() {
                        ga[k] += g.data[k] * y * (1.0 - y);
                    }
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = &mut done[a.0].data;
                    for (k, x) in av.data.iter().enumerate() {
                        ga[k] += g.data[k] * sigmoid(*x);
                    }
                }
                Op::Neg(a) => accumulate_broadcast(&mut done[a.0], g, |x| -x),
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    let ga = &mut done[a.0].data;
                    for (k, x) in av.data.iter().enumerate() {
                        if *x >= *lo && *x <= *hi {
                            ga[k] += g.data[k];
                        }
                    }
                }
                Op::FloorMagnitude(a, eps) => {
                    let av = &self.nodes[a.0].value;
                    let ga = &mut done[a.0].data;
                    for (k, x) in av.data.iter().enumerate() {
                        if x.abs() >= *eps {
                            ga[k] += g.data[k];
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) + ln(1 + e^-|x|)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `sign(x) * max(|x|, eps)` with `sign(0) = -1`.
pub fn floor_magnitude(x: f64, eps: f64) -> f64 {
    if x.abs() >= eps {
        x
    } else if x > 0.0 {
        eps
    } else {
        -eps
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array {
        shape: a.shape,
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.shape,
        right: b.shape,
    };
    let rows = broadcast_dim(a.shape.rows, b.shape.rows).ok_or_else(mismatch)?;
    let cols = broadcast_dim(a.shape.cols, b.shape.cols).ok_or_else(mismatch)?;
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Array {
            shape: a.shape,
            data,
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(a.data[broadcast_index(a.shape, r, c)], b.data[broadcast_index(b.shape, r, c)]));
        }
    }
    Ok(Array {
        shape: Shape::new(rows, cols),
        data,
    })
}

fn broadcast_index(shape: Shape, r: usize, c: usize) -> usize {
    let r = if shape.rows == 1 { 0 } else { r };
    let c = if shape.cols == 1 { 0 } else { c };
    r * shape.cols + c
}

/// Adds `f(g)` into `target`, summing over dimensions that `target` was
/// broadcast along.
fn accumulate_broadcast(target: &mut Array, g: &Array, f: impl Fn(f64) -> f64) {
    if target.shape == g.shape {
        for (t, &x) in target.data.iter_mut().zip(&g.data) {
            *t += f(x);
        }
        return;
    }
    let shape = target.shape;
    for r in 0..g.shape.rows {
        for c in 0..g.shape.cols {
            target.data[broadcast_index(shape, r, c)] += f(g.data[r * g.shape.cols + c]);
        }
    }
}

fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.shape.cols != b.shape.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape,
            right: b.shape,
        });
    }
    let (n, k, m) = (a.shape.rows, a.shape.cols, b.shape.cols);
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let out = &mut data[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &y) in out.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Ok(Array {
        shape: Shape::new(n, m),
        data,
    })
}

// dA += dC * B^T
fn matmul_grad_lhs(ga: &mut Array, g: &Array, b: &Array) {
    let (n, k, m) = (g.shape.rows, b.shape.rows, b.shape.cols);
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b.data[p * m..(p + 1) * m];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            ga.data[i * k + p] += dot;
        }
    }
}

// dB += A^T * dC
fn matmul_grad_rhs(gb: &mut Array, a: &Array, g: &Array) {
    let (n, k, m) = (a.shape.rows, a.shape.cols, g.shape.cols);
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let out = &mut gb.data[p * m..(p + 1) * m];
            for (o, &y) in out.iter_mut().zip(grow) {
                *o += x * y;
            }
        }
    }
}

fn log_softmax_rows(a: &Array) -> Array {
    let cols = a.shape.cols;
    let mut data = Vec::with_capacity(a.data.len());
    for row in a.data.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        data.extend(row.iter().map(|&x| x - lse));
    }
    Array {
        shape: a.shape,
        data,
    }
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[c]` against `(f(p + h e_c) - f(p - h e_c)) / 2h` for
/// every coordinate `c` in `coords`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 || h.is_nan() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check",
            left: Shape::new(1, params.len()),
            right: Shape::new(1, analytic.len()),
        });
    }
    let mut probe = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_coord = None;
    for &coord in coords {
        if coord >= params.len() {
            return Err(Error::IndexOutOfRange {
                index: coord,
                len: params.len(),
            });
        }
        probe[coord] = params[coord] + h;
        let plus = f(&probe)?;
        probe[coord] = params[coord] - h;
        let minus = f(&probe)?;
        probe[coord] = params[coord];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation { coord });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[coord], numeric);
        if worst_coord.is_none() || err > max_rel_error {
            max_rel_error = err;
            worst_coord = Some(coord);
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_coord,
        checked: coords.len(),
        tol,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_softmax_of_uniform_row() {
        let mut g = Graph::new();
        let x = g.leaf(Array::row(vec![0.0; 4]));
        let y = g.log_softmax(x);
        for &v in g.value(y).data() {
            assert!(close(v, -(4f64.ln()), 1e-15));
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Array::new(2, 3, vec![1000.0, 1001.0, 999.0, -1e4, 0.0, 3.0]).unwrap());
        let y = g.log_softmax(x);
        for row in g.value(y).data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!(close(s, 1.0, 1e-12));
        }
    }

    #[test]
    fn softplus_and_sigmoid_values() {
        assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-15));
        // 1/(1+e^-2.5), evaluated with 30-digit arithmetic
        assert!(close(sigmoid(2.5), 0.924141819978756, 1e-12));
        assert!(close(softplus(-800.0), 0.0, 1e-300));
        assert!(close(softplus(800.0), 800.0, 1e-12));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Array::row(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn softplus_of_negated_input_gradient() {
        let mut g = Graph::new();
        let u = g.leaf(Array::scalar(0.0));
        let nu = g.neg(u);
        let loss = g.softplus(nu);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(u).item(), -0.5);
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut g = Graph::new();
        let y = g.leaf(Array::row(vec![0.3, -1.2]));
        let d = g.detach(y);
        let sq = g.mul(d, d).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert!(g.grad(y).data().iter().all(|&v| v == 0.0));
        assert!(g.is_detached(d));
        assert_eq!(g.op_tag(d), "detach");
    }

    #[test]
    fn detach_keeps_other_paths() {
        // f = y * sg(y): df/dy = sg(y) = y
        let mut g = Graph::new();
        let y = g.leaf(Array::scalar(3.0));
        let d = g.detach(y);
        let p = g.mul(y, d).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(y).item(), 3.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Array::zeros(Shape::new(2, 3)));
        let b = g.leaf(Array::zeros(Shape::new(3, 2)));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2x3]") && err.contains("[3x2]"), "{err}");
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn gather_out_of_range() {
        let mut g = Graph::new();
        let a = g.leaf(Array::row(vec![1.0, 2.0]));
        assert!(matches!(
            g.gather(a, vec![0, 2], Shape::new(1, 2)),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn gather_accumulates_duplicates() {
        let mut g = Graph::new();
        let a = g.leaf(Array::row(vec![1.0, 2.0, 3.0]));
        let picked = g.gather(a, vec![1, 1, 2], Shape::new(3, 1)).unwrap();
        let s = g.sum(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Array::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarSeed(_))));
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let mut g = Graph::no_grad();
        let a = g.leaf(Array::scalar(1.0));
        let b = g.neg(a);
        assert_eq!(g.value(b).item(), -1.0);
        assert!(matches!(g.backward(b), Err(Error::NotRecording)));
    }

    #[test]
    fn unreachable_nodes_have_zero_grad() {
        let mut g = Graph::new();
        let a = g.leaf(Array::scalar(2.0));
        let b = g.leaf(Array::scalar(5.0));
        let s = g.scale(a, 3.0);
        let _after = g.mul(s, b).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).item(), 3.0);
        assert_eq!(g.grad(b).item(), 0.0);
    }

    #[test]
    fn broadcast_row_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let m = g.leaf(Array::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let bias = g.leaf(Array::row(vec![0.5, -0.5]));
        let y = g.add(m, bias).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 1.5, 3.5, 3.5, 5.5, 5.5]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(bias).data(), &[3.0, 3.0]);
    }

    #[test]
    fn floor_magnitude_sign_convention() {
        assert_eq!(floor_magnitude(0.0, 1e-5), -1e-5);
        assert_eq!(floor_magnitude(1e-9, 1e-5), 1e-5);
        assert_eq!(floor_magnitude(-1e-9, 1e-5), -1e-5);
        assert_eq!(floor_magnitude(-2.0, 1e-5), -2.0);
    }

    #[test]
    fn finite_diff_softplus_product() {
        // d/dw softplus(w x) = x * sigmoid(w x)
        let (w, x) = (0.3, 1.0);
        let analytic = {
            let mut g = Graph::new();
            let wn = g.leaf(Array::scalar(w));
            let xn = g.leaf(Array::scalar(x));
            let p = g.mul(wn, xn).unwrap();
            let l = g.softplus(p);
            g.backward(l).unwrap();
            g.grad(wn).item()
        };
        let symbolic = x / (1.0 + (-(w * x)).exp());
        assert!(close(analytic, symbolic, 1e-15));
        let report = finite_diff_check(
            |p| Ok(softplus(p[0] * x)),
            &[w],
            &[analytic],
            &[0],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn finite_diff_zero_cases() {
        let constant = finite_diff_check(|_| Ok(4.0), &[1.0, 2.0], &[0.0, 0.0], &[0, 1], 1e-4, 1e-4).unwrap();
        assert!(constant.passed);
        assert_eq!(constant.max_rel_error, 0.0);
        let squares = finite_diff_check(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0, 1],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(squares.passed);
    }

    #[test]
    fn finite_diff_errors() {
        assert!(finite_diff_check(|_| Ok(0.0), &[1.0], &[0.0], &[0], 0.0, 1e-4).is_err());
        assert!(matches!(
            finite_diff_check(
                |p| Ok(if p[0] > 1.0 { f64::INFINITY } else { 0.0 }),
                &[1.0],
                &[0.0],
                &[0],
                1e-4,
                1e-4
            ),
            Err(Error::NonFiniteEvaluation { coord: 0 })
        ));
    }
}

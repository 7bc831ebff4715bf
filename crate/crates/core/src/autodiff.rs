//! Computation-graph autodiff over `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node caches its primal
//! value at construction time, so node ids are a valid topological order.
//!
//! Reverse mode ([`Graph::grad`]) emits the adjoint computation as new nodes in
//! the same arena. Gradients are therefore ordinary graph values and can be
//! differentiated again: a second reverse pass gives mixed partials, and a
//! tangent sweep over the gradient nodes ([`Graph::tangents`]) gives
//! forward-over-reverse Hessian-vector products.
//!
//! Conventions: ReLU has derivative 0 at 0 (first and second order), the step
//! function has zero derivative everywhere, and masks built from values (TopK,
//! softmax max-shift) enter as constants.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[m,n] + [1,n]`, bias added to every row.
    AddRow(Var, Var),
    /// `[m,n] -> [1,n]`
    SumRows(Var),
    /// `[1,n] -> [m,n]`
    BroadcastRows(Var, usize),
    /// `[m,n] -> [m,1]`
    SumCols(Var),
    /// `[m,1] -> [m,n]`
    BroadcastCols(Var, usize),
    Sum(Var),
    /// `[1,1] -> [m,n]`
    Expand(Var, usize, usize),
    Relu(Var),
    Step(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>, usize),
}

/// Primitive kind of a node, for introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Transpose,
    AddRow,
    SumRows,
    BroadcastRows,
    SumCols,
    BroadcastCols,
    Sum,
    Expand,
    Relu,
    Step,
    Exp,
    Log,
    Recip,
    Sqrt,
    GatherRows,
    ScatterRows,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::AddRow(..) => OpKind::AddRow,
            Op::SumRows(..) => OpKind::SumRows,
            Op::BroadcastRows(..) => OpKind::BroadcastRows,
            Op::SumCols(..) => OpKind::SumCols,
            Op::BroadcastCols(..) => OpKind::BroadcastCols,
            Op::Sum(..) => OpKind::Sum,
            Op::Expand(..) => OpKind::Expand,
            Op::Relu(..) => OpKind::Relu,
            Op::Step(..) => OpKind::Step,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Recip(..) => OpKind::Recip,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ScatterRows(..) => OpKind::ScatterRows,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a, _)
            | Op::Sum(a)
            | Op::Expand(a, ..)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, ..) => vec![a],
        }
    }

    /// Parents through which a derivative flows.
    fn diff_parents(&self) -> Vec<Var> {
        match self {
            Op::Step(_) => vec![],
            other => other.parents(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Read-only view of one graph node.
#[derive(Debug)]
pub struct GraphNode<'a> {
    pub kind: OpKind,
    pub parents: Vec<Var>,
    pub value: &'a Tensor,
}

/// Primal/tangent pair produced by forward-mode propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if !primal.same_shape(&tangent) {
            return Err(Error::shape(
                "DualTensor",
                format!("primal {:?} vs tangent {:?}", primal.shape(), tangent.shape()),
            ));
        }
        Ok(DualTensor { primal, tangent })
    }

    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros_like(&primal);
        DualTensor { primal, tangent }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn node(&self, v: Var) -> GraphNode<'_> {
        let n = &self.nodes[v.0];
        GraphNode {
            kind: n.op.kind(),
            parents: n.op.parents(),
            value: &n.value,
        }
    }

    /// Input, parameter or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = if value.shape().len() == 1 {
            let n = value.len();
            value.reshape(1, n)
        } else {
            value
        };
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn add_node(&mut self, op: Op) -> Var {
        let value = self.eval(&op);
        self.push(op, value)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn eval(&self, op: &Op) -> Tensor {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Add(a, b) => {
                assert_same(val(a), val(b), "add");
                val(a).add(val(b))
            }
            Op::Sub(a, b) => {
                assert_same(val(a), val(b), "sub");
                val(a).sub(val(b))
            }
            Op::Mul(a, b) => {
                assert_same(val(a), val(b), "mul");
                val(a).mul(val(b))
            }
            Op::Scale(a, c) => val(a).scale(*c),
            Op::MatMul(a, b) => val(a).matmul(val(b)),
            Op::Transpose(a) => val(a).transpose(),
            Op::AddRow(a, b) => add_row(val(a), val(b)),
            Op::SumRows(a) => sum_rows(val(a)),
            Op::BroadcastRows(a, m) => broadcast_rows(val(a), *m),
            Op::SumCols(a) => sum_cols(val(a)),
            Op::BroadcastCols(a, n) => broadcast_cols(val(a), *n),
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
            Op::Expand(a, m, n) => Tensor::full(*m, *n, val(a).item()),
            Op::Relu(a) => val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => val(a).map(step),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Log(a) => val(a).map(f64::ln),
            Op::Recip(a) => val(a).map(|x| 1.0 / x),
            Op::Sqrt(a) => val(a).map(f64::sqrt),
            Op::GatherRows(a, idx) => gather_rows(val(a), idx),
            Op::ScatterRows(a, idx, rows) => scatter_rows(val(a), idx, *rows),
        }
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_node(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.add_node(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.add_node(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.add_node(Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = self.dims(a);
        let (k2, _) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension {k} vs {k2}");
        self.add_node(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.add_node(Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.dims(bias), (1, self.dims(a).1), "row bias shape");
        self.add_node(Op::AddRow(a, bias))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.add_node(Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        assert_eq!(self.dims(a).0, 1, "broadcast_rows needs a single row");
        self.add_node(Op::BroadcastRows(a, rows))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.add_node(Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        assert_eq!(self.dims(a).1, 1, "broadcast_cols needs a single column");
        self.add_node(Op::BroadcastCols(a, cols))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.add_node(Op::Sum(a))
    }

    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.dims(a), (1, 1), "expand needs a scalar");
        self.add_node(Op::Expand(a, rows, cols))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.add_node(Op::Relu(a))
    }

    /// Heaviside step, `1` where `x > 0`; zero derivative.
    pub fn step(&mut self, a: Var) -> Var {
        self.add_node(Op::Step(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.add_node(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.add_node(Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.add_node(Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.add_node(Op::Sqrt(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let rows = self.dims(a).0;
        assert!(idx.iter().all(|&i| i < rows), "gather index out of range");
        self.add_node(Op::GatherRows(a, idx.into()))
    }

    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Var {
        assert_eq!(self.dims(a).0, idx.len(), "scatter needs one index per row");
        assert!(idx.iter().all(|&i| i < rows), "scatter index out of range");
        self.add_node(Op::ScatterRows(a, idx.into(), rows))
    }

    // ── composites ──────────────────────────────────────────────────────

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.dims(a);
        let k = self.leaf(Tensor::full(m, n, c));
        self.add(a, k)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let k = self.leaf(c);
        self.mul(a, k)
    }

    /// Dot product of `a` with a constant of the same shape, as a scalar node.
    pub fn dot_const(&mut self, a: Var, c: &Tensor) -> Var {
        let prod = self.mul_const(a, c.clone());
        self.sum(prod)
    }

    /// TopK straight-through: keeps entries where `mask` is nonzero. The mask
    /// is a constant, so the selection contributes no derivative.
    pub fn topk_mask(&mut self, a: Var, mask: Tensor) -> Var {
        self.mul_const(a, mask)
    }

    /// `x * sigmoid(x)`, smooth everywhere.
    pub fn silu(&mut self, a: Var) -> Var {
        let na = self.neg(a);
        let e = self.exp(na);
        let d = self.add_scalar(e, 1.0);
        let s = self.recip(d);
        self.mul(a, s)
    }

    fn row_max_shift(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = v.dims2();
        let mut shift = Vec::with_capacity(m * n);
        for r in 0..m {
            let mx = v.row_slice(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            shift.extend(std::iter::repeat_n(mx, n));
        }
        let k = self.leaf(Tensor::matrix(m, n, shift));
        self.sub(a, k)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let n = self.dims(a).1;
        let shifted = self.row_max_shift(a);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let inv = self.recip(s);
        let inv = self.broadcast_cols(inv, n);
        self.mul(e, inv)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let n = self.dims(a).1;
        let shifted = self.row_max_shift(a);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let lse = self.log(s);
        let lse = self.broadcast_cols(lse, n);
        self.sub(shifted, lse)
    }

    /// Per-row cross-entropy `-log softmax(logits)[row, target]`, shape `[m,1]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, n) = self.dims(logits);
        assert_eq!(m, targets.len(), "one target per row");
        let mut onehot = Tensor::zeros(m, n);
        for (r, &t) in targets.iter().enumerate() {
            onehot.set(r, t, 1.0);
        }
        let lsm = self.log_softmax_rows(logits);
        let picked = self.mul_const(lsm, onehot);
        let rows = self.sum_cols(picked);
        self.neg(rows)
    }

    /// Summed softmax cross-entropy over rows, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let rows = self.cross_entropy_rows(logits, targets);
        self.sum(rows)
    }

    // ── reverse mode ────────────────────────────────────────────────────

    /// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
    ///
    /// The returned gradients are graph nodes and can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let shape = self.value(output).shape().to_vec();
        if self.value(output).len() != 1 {
            return Err(Error::NonScalar(shape));
        }
        let n = output.0 + 1;

        // Ancestors of the output, along any edge and along differentiable edges.
        let mut reach_any = vec![false; n];
        let mut reach_diff = vec![false; n];
        reach_any[output.0] = true;
        reach_diff[output.0] = true;
        for i in (0..n).rev() {
            if !reach_any[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            for p in op.parents() {
                reach_any[p.0] = true;
            }
            if reach_diff[i] {
                for p in op.diff_parents() {
                    reach_diff[p.0] = true;
                }
            }
        }
        for &w in wrt {
            if w.0 >= n || !reach_any[w.0] {
                return Err(Error::NotInGraph(w.0));
            }
            if !reach_diff[w.0] {
                return Err(Error::NonDifferentiable(w.0));
            }
        }

        // Descendants of any wrt node along differentiable edges.
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(n);
        let mut depends = vec![false; n];
        for &w in wrt {
            depends[w.0] = true;
        }
        for i in start..n {
            if !depends[i] {
                depends[i] = self.nodes[i].op.diff_parents().iter().any(|p| depends[p.0]);
            }
        }
        let active = |i: usize| reach_diff[i] && depends[i];

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.leaf(Tensor::scalar(1.0)));
        for i in (start..n).rev() {
            if !active(i) {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let me = Var(i);
            match op {
                Op::Leaf | Op::Step(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g, &active);
                    self.accumulate(&mut adj, b, g, &active);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g, &active);
                    if active(b.0) {
                        let gb = self.neg(g);
                        self.accumulate(&mut adj, b, gb, &active);
                    }
                }
                Op::Mul(a, b) => {
                    if active(a.0) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga, &active);
                    }
                    if active(b.0) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb, &active);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::MatMul(a, b) => {
                    if active(a.0) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        self.accumulate(&mut adj, a, ga, &active);
                    }
                    if active(b.0) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        self.accumulate(&mut adj, b, gb, &active);
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::AddRow(a, b) => {
                    self.accumulate(&mut adj, a, g, &active);
                    if active(b.0) {
                        let gb = self.sum_rows(g);
                        self.accumulate(&mut adj, b, gb, &active);
                    }
                }
                Op::SumRows(a) => {
                    let m = self.dims(a).0;
                    let ga = self.broadcast_rows(g, m);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::BroadcastRows(a, _) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::SumCols(a) => {
                    let n = self.dims(a).1;
                    let ga = self.broadcast_cols(g, n);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::BroadcastCols(a, _) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Sum(a) => {
                    let (m, n) = self.dims(a);
                    let ga = self.expand(g, m, n);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Expand(a, ..) => {
                    let ga = self.sum(g);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Relu(a) => {
                    let mask = self.step(a);
                    let ga = self.mul(g, mask);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, me);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Log(a) => {
                    let inv = self.recip(a);
                    let ga = self.mul(g, inv);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Recip(a) => {
                    let y2 = self.mul(me, me);
                    let t = self.mul(g, y2);
                    let ga = self.neg(t);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::Sqrt(a) => {
                    let inv = self.recip(me);
                    let t = self.mul(g, inv);
                    let ga = self.scale(t, 0.5);
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::GatherRows(a, idx) => {
                    let rows = self.dims(a).0;
                    let ga = self.add_node(Op::ScatterRows(g, idx, rows));
                    self.accumulate(&mut adj, a, ga, &active);
                }
                Op::ScatterRows(a, idx, _) => {
                    let ga = self.add_node(Op::GatherRows(g, idx));
                    self.accumulate(&mut adj, a, ga, &active);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| adj[w.0].expect("reachable parameter received an adjoint"))
            .collect())
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<Var>],
        target: Var,
        contrib: Var,
        active: &impl Fn(usize) -> bool,
    ) {
        if !active(target.0) {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    /// Gradient values, without keeping handles to the gradient nodes.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.grad(output, wrt)?;
        Ok(grads.iter().map(|&g| self.value(g).clone()).collect())
    }

    /// Mixed partial `d/d(wrt) sum_i <grads_i, contraction_i>`.
    ///
    /// `grads` are gradient nodes produced by [`Graph::grad`]; the contraction
    /// vectors are constants.
    pub fn grad_through_gradient(
        &mut self,
        grads: &[Var],
        contraction: &[Tensor],
        wrt: Var,
    ) -> Result<Var> {
        if grads.len() != contraction.len() {
            return Err(Error::shape(
                "grad_through_gradient",
                format!("{} gradients vs {} contraction vectors", grads.len(), contraction.len()),
            ));
        }
        let mut total: Option<Var> = None;
        for (&g, s) in grads.iter().zip(contraction) {
            if self.dims(g) != s.dims2() {
                return Err(Error::shape(
                    "grad_through_gradient",
                    format!("gradient {:?} vs contraction {:?}", self.value(g).shape(), s.shape()),
                ));
            }
            let term = self.dot_const(g, s);
            total = Some(match total {
                None => term,
                Some(t) => self.add(t, term),
            });
        }
        let projection = total.ok_or_else(|| Error::Invalid("empty contraction".into()))?;
        Ok(self.grad(projection, &[wrt])?[0])
    }

    // ── forward mode ────────────────────────────────────────────────────

    /// Propagates tangents from `seeds` through every node up to the last
    /// output and returns one [`DualTensor`] per output.
    pub fn tangents(&self, seeds: &[(Var, &Tensor)], outputs: &[Var]) -> Result<Vec<DualTensor>> {
        for (v, t) in seeds {
            if self.dims(*v) != t.dims2() {
                return Err(Error::shape(
                    "tangents",
                    format!("seed {:?} for node of shape {:?}", t.shape(), self.value(*v).shape()),
                ));
            }
        }
        let Some(end) = outputs.iter().map(|v| v.0).max() else {
            return Ok(vec![]);
        };
        let start = seeds.iter().map(|(v, _)| v.0).min().unwrap_or(end + 1);
        let mut tan: Vec<Option<Tensor>> = vec![None; (end + 1).saturating_sub(start)];
        for (v, t) in seeds {
            if v.0 > end {
                continue;
            }
            let (m, n) = self.dims(*v);
            let t = (*t).clone().reshape(m, n);
            let slot = &mut tan[v.0 - start];
            *slot = Some(match slot.take() {
                None => t,
                Some(prev) => prev.add(&t),
            });
        }
        for i in start..=end {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            tan[i - start] = self.tangent_rule(i, &tan, start);
        }
        Ok(outputs
            .iter()
            .map(|&o| {
                let primal = self.value(o).clone();
                let tangent = o
                    .0
                    .checked_sub(start)
                    .and_then(|k| tan[k].clone())
                    .unwrap_or_else(|| Tensor::zeros_like(&primal));
                DualTensor { primal, tangent }
            })
            .collect())
    }

    fn tangent_rule(&self, i: usize, tan: &[Option<Tensor>], start: usize) -> Option<Tensor> {
        let get = |v: Var| v.0.checked_sub(start).and_then(|k| tan[k].as_ref());
        let val = |v: Var| &self.nodes[v.0].value;
        let me = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Step(_) => None,
            Op::Add(a, b) => sum_opt(get(*a).cloned(), get(*b).cloned()),
            Op::Sub(a, b) => sum_opt(get(*a).cloned(), get(*b).map(|t| t.scale(-1.0))),
            Op::Mul(a, b) => sum_opt(
                get(*a).map(|t| t.mul(val(*b))),
                get(*b).map(|t| val(*a).mul(t)),
            ),
            Op::Scale(a, c) => get(*a).map(|t| t.scale(*c)),
            Op::MatMul(a, b) => sum_opt(
                get(*a).map(|t| t.matmul(val(*b))),
                get(*b).map(|t| val(*a).matmul(t)),
            ),
            Op::Transpose(a) => get(*a).map(Tensor::transpose),
            Op::AddRow(a, b) => {
                let m = val(*a).rows();
                sum_opt(get(*a).cloned(), get(*b).map(|t| broadcast_rows(t, m)))
            }
            Op::SumRows(a) => get(*a).map(sum_rows),
            Op::BroadcastRows(a, m) => get(*a).map(|t| broadcast_rows(t, *m)),
            Op::SumCols(a) => get(*a).map(sum_cols),
            Op::BroadcastCols(a, n) => get(*a).map(|t| broadcast_cols(t, *n)),
            Op::Sum(a) => get(*a).map(|t| Tensor::scalar(t.sum())),
            Op::Expand(a, m, n) => get(*a).map(|t| Tensor::full(*m, *n, t.item())),
            Op::Relu(a) => get(*a).map(|t| t.zip_map(val(*a), |dt, x| dt * step(x))),
            Op::Exp(a) => get(*a).map(|t| t.mul(me)),
            Op::Log(a) => get(*a).map(|t| t.zip_map(val(*a), |dt, x| dt / x)),
            Op::Recip(a) => get(*a).map(|t| t.zip_map(me, |dt, y| -dt * y * y)),
            Op::Sqrt(a) => get(*a).map(|t| t.zip_map(me, |dt, y| 0.5 * dt / y)),
            Op::GatherRows(a, idx) => get(*a).map(|t| gather_rows(t, idx)),
            Op::ScatterRows(a, idx, rows) => get(*a).map(|t| scatter_rows(t, idx, *rows)),
        }
    }

    /// Rebuilds every non-leaf value from its parents; used to check replay
    /// determinism.
    pub fn replay(&self) -> Graph {
        let mut out = Graph::new();
        for node in &self.nodes {
            match node.op {
                Op::Leaf => {
                    out.push(Op::Leaf, node.value.clone());
                }
                ref op => {
                    out.add_node(op.clone());
                }
            }
        }
        out
    }
}

// ── free-function entry points ──────────────────────────────────────────

/// Exact directional derivative `J_F(point) direction` of a graph program.
pub fn jvp<F>(program: F, point: &Tensor, direction: &Tensor) -> Result<DualTensor>
where
    F: FnOnce(&mut Graph, Var) -> Var,
{
    if point.dims2() != direction.dims2() {
        return Err(Error::shape(
            "jvp",
            format!("point {:?} vs direction {:?}", point.shape(), direction.shape()),
        ));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = program(&mut g, x);
    let mut out = g.tangents(&[(x, direction)], &[y])?;
    Ok(out.remove(0))
}

/// Gradient of a scalar program with respect to each parameter.
pub fn grad<F>(program: F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = program(&mut g, &vars);
    g.grad_values(loss, &vars)
}

/// Hessian-vector product by forward-mode differentiation of the gradient.
pub fn hvp<F>(loss: F, params: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    if params.len() != v.len() {
        return Err(Error::shape("hvp", "direction is not conformal with parameters"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let l = loss(&mut g, &vars);
    let grads = g.grad(l, &vars)?;
    hvp_on(&g, &vars, &grads, v)
}

/// Hessian-vector product on a graph that already holds the gradient nodes.
pub fn hvp_on(g: &Graph, params: &[Var], grads: &[Var], v: &[Tensor]) -> Result<Vec<Tensor>> {
    if params.len() != v.len() {
        return Err(Error::shape("hvp", "direction is not conformal with parameters"));
    }
    let seeds: Vec<(Var, &Tensor)> = params.iter().copied().zip(v.iter()).collect();
    Ok(g.tangents(&seeds, grads)?
        .into_iter()
        .map(|d| d.tangent)
        .collect())
}

// ── numeric kernels shared by eval and tangent rules ─────────────────────

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn assert_same(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.dims2(), b.dims2(), "{op}: shape mismatch");
}

fn sum_opt(a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
    }
}

fn add_row(a: &Tensor, bias: &Tensor) -> Tensor {
    let (m, n) = a.dims2();
    let mut out = a.clone();
    for r in 0..m {
        for c in 0..n {
            out.data_mut()[r * n + c] += bias.data()[c];
        }
    }
    out
}

fn sum_rows(a: &Tensor) -> Tensor {
    let (m, n) = a.dims2();
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, x) in out.iter_mut().zip(a.row_slice(r)) {
            *o += x;
        }
    }
    Tensor::matrix(1, n, out)
}

fn broadcast_rows(a: &Tensor, m: usize) -> Tensor {
    let n = a.cols();
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(a.data());
    }
    Tensor::matrix(m, n, out)
}

fn sum_cols(a: &Tensor) -> Tensor {
    let m = a.rows();
    Tensor::matrix(m, 1, (0..m).map(|r| a.row_slice(r).iter().sum()).collect())
}

fn broadcast_cols(a: &Tensor, n: usize) -> Tensor {
    let m = a.rows();
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        out.extend(std::iter::repeat_n(a.data()[r], n));
    }
    Tensor::matrix(m, n, out)
}

fn gather_rows(a: &Tensor, idx: &[usize]) -> Tensor {
    let n = a.cols();
    let mut out = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        out.extend_from_slice(a.row_slice(i));
    }
    Tensor::matrix(idx.len(), n, out)
}

fn scatter_rows(a: &Tensor, idx: &[usize], rows: usize) -> Tensor {
    let n = a.cols();
    let mut out = Tensor::zeros(rows, n);
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..n {
            out.data_mut()[i * n + c] += a.data()[r * n + c];
        }
    }
    out
}

//! Wengert-style computation tape for reverse-mode differentiation.
//!
//! A tape records one forward computation over `[rows, cols]` tensors and
//! replays it in exact reverse order to accumulate parameter adjoints.
//! Parameters are referenced by `ParamId` into an external `ParamStore`;
//! a tape may restrict gradient flow to a "live" subset so per-stage
//! losses can leave other stages' parameters untouched while adjoints
//! still propagate through their computations.

use std::collections::{HashMap, HashSet};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(NodeId, NodeId),
    /// `a + b`, where `b` is either the same shape or a `[1, n]` row.
    Add(NodeId, NodeId),
    /// `a - b`, same broadcast rule as `Add`.
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    /// `a [m,n] * b [1,n]`, row-broadcast.
    MulRow(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Square(NodeId),
    /// `alpha * tanh(x / alpha)` — bounded to `(-alpha, alpha)`.
    SoftClamp(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    /// Stacks same-width blocks vertically.
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// `[m,n] -> [m,1]` row sums.
    SumCols(NodeId),
    /// `[m,n] -> [1,n]` column means.
    MeanRows(NodeId),
    MeanAll(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    /// Parameters allowed to receive gradient; `None` means all.
    live: Option<HashSet<ParamId>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Tape<'s> {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new(), live: None }
    }

    /// A tape on which only `live` parameters accumulate gradient. Other
    /// parameters still participate in the forward values and adjoints flow
    /// *through* their ops, but their own adjoints are never materialized.
    pub fn with_live_params(store: &'s ParamStore, live: HashSet<ParamId>) -> Tape<'s> {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new(), live: Some(live) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let live = self.live.as_ref().map_or(true, |set| set.contains(&id));
        let value = self.store.get(id).clone();
        let n = self.push(Op::Param(id), value, live);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(Op::MatMul(a, b), v, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::add_row(self.value(a), self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(Op::Add(a, b), v, req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.value(b).map(|x| -x);
        let v = tensor::add_row(self.value(a), &bv);
        let req = self.requires(a) || self.requires(b);
        self.push(Op::Sub(a, b), v, req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(av.rows(), av.cols(), data);
        let req = self.requires(a) || self.requires(b);
        self.push(Op::MulElem(a, b), v, req)
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "mul_row expects a [1,n] rhs");
        assert_eq!(av.cols(), bv.cols(), "mul_row column mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            let cols = v.cols();
            let row = &mut v.data_mut()[r * cols..(r + 1) * cols];
            for (x, &s) in row.iter_mut().zip(bv.data()) {
                *x *= s;
            }
        }
        let req = self.requires(a) || self.requires(b);
        self.push(Op::MulRow(a, b), v, req)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let req = self.requires(a);
        self.push(Op::Neg(a), v, req)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| s * x);
        let req = self.requires(a);
        self.push(Op::Scale(a, s), v, req)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let req = self.requires(a);
        self.push(Op::AddScalar(a), v, req)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let req = self.requires(a);
        self.push(Op::Tanh(a), v, req)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let req = self.requires(a);
        self.push(Op::Sigmoid(a), v, req)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let req = self.requires(a);
        self.push(Op::Exp(a), v, req)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let req = self.requires(a);
        self.push(Op::Square(a), v, req)
    }

    pub fn soft_clamp(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).map(|x| alpha * (x / alpha).tanh());
        let req = self.requires(a);
        self.push(Op::SoftClamp(a, alpha), v, req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&tensors);
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, req)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data);
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, req)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = tensor::slice_cols(self.value(a), from, to);
        let req = self.requires(a);
        self.push(Op::SliceCols(a, from, to), v, req)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            v.set(r, 0, av.row_slice(r).iter().sum());
        }
        let req = self.requires(a);
        self.push(Op::SumCols(a), v, req)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let m = av.rows() as f64;
        let mut v = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for c in 0..av.cols() {
                v.set(0, c, v.at(0, c) + av.at(r, c) / m);
            }
        }
        let req = self.requires(a);
        self.push(Op::MeanRows(a), v, req)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64);
        let req = self.requires(a);
        self.push(Op::MeanAll(a), v, req)
    }

    /// Runs the reverse pass from `output` seeded with `output_adjoint`,
    /// returns adjoints for every live parameter reachable from the output,
    /// and clears the tape.
    pub fn backward(&mut self, output: NodeId, output_adjoint: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if output_adjoint.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                context: "backward output adjoint".into(),
                expected: format!("{out_shape:?}"),
                got: format!("{:?}", output_adjoint.shape()),
            });
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(output_adjoint.clone());
        let mut grads = Gradients::zeros(self.store);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let adj = match adjoints[i].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Param(id) => grads.accumulate(*id, &adj),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let da = tensor::matmul_nt(&adj, &self.nodes[b.0].value);
                        add_adjoint(&mut adjoints, a, da);
                    }
                    if self.requires(b) {
                        let db = tensor::matmul_tn(&self.nodes[a.0].value, &adj);
                        add_adjoint(&mut adjoints, b, db);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(self.nodes[i].op, Op::Sub(..));
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        add_adjoint(&mut adjoints, a, adj.clone());
                    }
                    if self.requires(b) {
                        let sign = if negate { -1.0 } else { 1.0 };
                        let db = reduce_to_shape(&adj, self.nodes[b.0].value.shape());
                        add_adjoint(&mut adjoints, b, db.map(|x| sign * x));
                    }
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let bv = &self.nodes[b.0].value;
                        let da = elementwise(&adj, bv, |x, y| x * y);
                        add_adjoint(&mut adjoints, a, da);
                    }
                    if self.requires(b) {
                        let av = &self.nodes[a.0].value;
                        let db = elementwise(&adj, av, |x, y| x * y);
                        add_adjoint(&mut adjoints, b, db);
                    }
                }
                Op::MulRow(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let bv = &self.nodes[b.0].value;
                        let mut da = adj.clone();
                        for r in 0..da.rows() {
                            let cols = da.cols();
                            let row = &mut da.data_mut()[r * cols..(r + 1) * cols];
                            for (x, &s) in row.iter_mut().zip(bv.data()) {
                                *x *= s;
                            }
                        }
                        add_adjoint(&mut adjoints, a, da);
                    }
                    if self.requires(b) {
                        let av = &self.nodes[a.0].value;
                        let mut db = Tensor::zeros(1, av.cols());
                        for r in 0..av.rows() {
                            for c in 0..av.cols() {
                                db.set(0, c, db.at(0, c) + adj.at(r, c) * av.at(r, c));
                            }
                        }
                        add_adjoint(&mut adjoints, b, db);
                    }
                }
                Op::Neg(a) => {
                    let a = *a;
                    add_adjoint(&mut adjoints, a, adj.map(|x| -x));
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    add_adjoint(&mut adjoints, a, adj.map(|x| s * x));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    add_adjoint(&mut adjoints, a, adj);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da = elementwise(&adj, &self.nodes[i].value, |g, y| g * (1.0 - y * y));
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let da = elementwise(&adj, &self.nodes[i].value, |g, y| g * y * (1.0 - y));
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let da = elementwise(&adj, &self.nodes[i].value, |g, y| g * y);
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::Square(a) => {
                    let a = *a;
                    let da = elementwise(&adj, &self.nodes[a.0].value, |g, x| 2.0 * g * x);
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::SoftClamp(a, alpha) => {
                    let (a, alpha) = (*a, *alpha);
                    let da = elementwise(&adj, &self.nodes[i].value, |g, y| {
                        let t = y / alpha;
                        g * (1.0 - t * t)
                    });
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.requires(p) {
                            let dp = tensor::slice_cols(&adj, off, off + w);
                            add_adjoint(&mut adjoints, p, dp);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.rows();
                        let w = self.nodes[p.0].value.cols();
                        if self.requires(p) {
                            let mut dp = Tensor::zeros(h, w);
                            dp.data_mut()
                                .copy_from_slice(&adj.data()[off * w..(off + h) * w]);
                            add_adjoint(&mut adjoints, p, dp);
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, from, _to) => {
                    let (a, from) = (*a, *from);
                    let av_shape = self.nodes[a.0].value.shape();
                    let mut da = Tensor::zeros(av_shape[0], av_shape[1]);
                    for r in 0..adj.rows() {
                        for c in 0..adj.cols() {
                            da.set(r, from + c, adj.at(r, c));
                        }
                    }
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::SumCols(a) => {
                    let a = *a;
                    let av_shape = self.nodes[a.0].value.shape();
                    let mut da = Tensor::zeros(av_shape[0], av_shape[1]);
                    for r in 0..av_shape[0] {
                        let g = adj.at(r, 0);
                        for c in 0..av_shape[1] {
                            da.set(r, c, g);
                        }
                    }
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let av_shape = self.nodes[a.0].value.shape();
                    let m = av_shape[0] as f64;
                    let mut da = Tensor::zeros(av_shape[0], av_shape[1]);
                    for r in 0..av_shape[0] {
                        for c in 0..av_shape[1] {
                            da.set(r, c, adj.at(0, c) / m);
                        }
                    }
                    add_adjoint(&mut adjoints, a, da);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let av_shape = self.nodes[a.0].value.shape();
                    let g = adj.item() / (av_shape[0] * av_shape[1]) as f64;
                    add_adjoint(&mut adjoints, a, Tensor::filled(av_shape[0], av_shape[1], g));
                }
            }
        }

        self.nodes.clear();
        self.param_nodes.clear();
        Ok(grads)
    }

    /// `backward` for a `[1,1]` output seeded with adjoint 1.
    pub fn backward_scalar(&mut self, output: NodeId) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }
}

fn add_adjoint(adjoints: &mut [Option<Tensor>], id: NodeId, grad: Tensor) {
    match &mut adjoints[id.0] {
        Some(a) => a.add_scaled(&grad, 1.0),
        slot => *slot = Some(grad),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Sums a `[m,n]` adjoint down to `[1,n]` when the forward op broadcast a row.
fn reduce_to_shape(adj: &Tensor, shape: [usize; 2]) -> Tensor {
    if adj.shape() == shape {
        return adj.clone();
    }
    assert_eq!(shape[0], 1, "broadcast reduction expects a row target");
    assert_eq!(shape[1], adj.cols());
    let mut out = Tensor::zeros(1, adj.cols());
    for r in 0..adj.rows() {
        for c in 0..adj.cols() {
            out.set(0, c, out.at(0, c) + adj.at(r, c));
        }
    }
    out
}

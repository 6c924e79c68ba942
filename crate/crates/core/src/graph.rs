//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so every parent id is smaller than
//! its child id and the tape is a topological order by construction. Forward
//! values are computed eagerly when a node is built; [`Tape::backward`] walks
//! the tape once in reverse and accumulates adjoints over all paths.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs to `acos` are clamped to this open interval.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Operation recorded on a tape node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Trainable leaf.
    Param,
    /// Constant leaf; receives no gradient.
    Input,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    Add,
    /// Hadamard product.
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `[.., m] + [m]`, bias broadcast over leading axes.
    BiasAdd,
    Relu,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    Ln,
    Abs,
    Square,
    Sqrt,
    /// `acos` with the input clamped to `[-ACOS_CLAMP, ACOS_CLAMP]`.
    Acos,
    /// Sum of all entries, shape `[1]`.
    Sum,
    /// Mean of all entries, shape `[1]`.
    Mean,
    /// Concatenation along the last axis.
    Concat,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::BiasAdd => "bias_add",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Ln => "ln",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Acos => "acos",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// Append-only record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Derivative of the logistic function, `σ(x)(1 − σ(x))`.
pub fn sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn clamped_acos(x: f64) -> f64 {
    libm::acos(x.clamp(-ACOS_CLAMP, ACOS_CLAMP))
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

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, Vec::new(), value)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Param)
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends a node computing `op` over `parents` and evaluates it.
    pub fn build(&mut self, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        for p in parents {
            if p.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(p.0));
            }
        }
        let value = self.forward(&op, parents)?;
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        Ok(self.push(op, parents.to_vec(), value))
    }

    fn forward(&self, op: &Op, parents: &[NodeId]) -> Result<Tensor> {
        let arity = match op {
            Op::Param | Op::Input => 0,
            Op::MatMul | Op::Add | Op::Mul | Op::BiasAdd => 2,
            Op::Concat => usize::MAX,
            _ => 1,
        };
        if arity == 0 {
            return Err(Error::Arity {
                op: op.name(),
                expected: 0,
                actual: parents.len(),
            });
        }
        if arity == usize::MAX {
            if parents.is_empty() {
                return Err(Error::Arity {
                    op: op.name(),
                    expected: 1,
                    actual: 0,
                });
            }
        } else if parents.len() != arity {
            return Err(Error::Arity {
                op: op.name(),
                expected: arity,
                actual: parents.len(),
            });
        }
        let a = self.value(parents[0]);
        let unary = |f: &dyn Fn(f64) -> f64| {
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
        };
        Ok(match op {
            Op::Param | Op::Input => unreachable!(),
            Op::MatMul => {
                let b = self.value(parents[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(op, a, b));
                }
                matmul(a, b, false, false)
            }
            Op::Add | Op::Mul => {
                let b = self.value(parents[1]);
                if !a.same_shape(b) {
                    return Err(mismatch(op, a, b));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if *op == Op::Add { x + y } else { x * y })
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::BiasAdd => {
                let b = self.value(parents[1]);
                if b.rank() != 1 || b.numel() != a.last_dim() {
                    return Err(mismatch(op, a, b));
                }
                let w = a.last_dim();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + b.data()[i % w])
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::Scale(k) => unary(&|x| k * x),
            Op::AddScalar(k) => unary(&|x| x + k),
            Op::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid => unary(&sigmoid),
            Op::Ln => unary(&libm::log),
            Op::Abs => unary(&libm::fabs),
            Op::Square => unary(&|x| x * x),
            Op::Sqrt => unary(&libm::sqrt),
            Op::Acos => unary(&clamped_acos),
            Op::Softmax | Op::LogSoftmax => {
                let w = a.last_dim();
                let mut out = Vec::with_capacity(a.numel());
                for r in 0..a.outer_len() {
                    let row = a.row(r);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&x| libm::exp(x - m)).sum();
                    if *op == Op::Softmax {
                        out.extend(row.iter().map(|&x| libm::exp(x - m) / z));
                    } else {
                        let lz = libm::log(z) + m;
                        out.extend(row.iter().map(|&x| x - lz));
                    }
                }
                debug_assert_eq!(out.len(), a.outer_len() * w);
                Tensor::from_parts(a.shape().to_vec(), out)
            }
            Op::Sum => Tensor::scalar(a.data().iter().sum()),
            Op::Mean => Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64),
            Op::Concat => {
                let lead = &a.shape()[..a.rank() - 1];
                let mut width = 0;
                for p in parents {
                    let v = self.value(*p);
                    if &v.shape()[..v.rank() - 1] != lead {
                        return Err(mismatch(op, a, v));
                    }
                    width += v.last_dim();
                }
                let rows = a.outer_len();
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for p in parents {
                        data.extend_from_slice(self.value(*p).row(r));
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(width);
                Tensor::from_parts(shape, data)
            }
        })
    }

    /// Gradient of the scalar `root` with respect to every parameter node.
    ///
    /// Parameters that do not influence the root get a zero gradient.
    pub fn backward(&self, root: NodeId) -> Result<BTreeMap<NodeId, Tensor>> {
        let params: Vec<NodeId> = self.param_ids().collect();
        let grads = self.backward_to(root, &params)?;
        Ok(params.into_iter().zip(grads).collect())
    }

    /// Gradient of the scalar `root` with respect to arbitrary nodes.
    pub fn backward_to(&self, root: NodeId, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(root.0));
        }
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        // Only nodes that are targets or lie above one need adjoints.
        let mut relevant = vec![false; root.0 + 1];
        for t in targets {
            if t.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(t.0));
            }
            if t.0 <= root.0 {
                relevant[t.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !relevant[i] && self.nodes[i].parents.iter().any(|p| relevant[p.0]) {
                relevant[i] = true;
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.parents.is_empty() {
                self.propagate(i, &g, &relevant, &mut adj)?;
            }
            adj[i] = Some(g);
        }
        Ok(targets
            .iter()
            .map(|t| {
                let shape = self.value(*t).shape().to_vec();
                match adj.get(t.0).and_then(|a| a.clone()) {
                    Some(d) => Tensor::from_parts(shape, d),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        relevant: &[bool],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let ps = &node.parents;
        let pv = |k: usize| self.value(ps[k]);
        let mut contrib: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let want = |k: usize| relevant[ps[k].0];
        match &node.op {
            Op::Param | Op::Input => {}
            Op::MatMul => {
                let a = pv(0);
                let b = pv(1);
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                if want(0) {
                    contrib.push((ps[0], matmul(&gt, b, false, true).into_data()));
                }
                if want(1) {
                    contrib.push((ps[1], matmul(a, &gt, true, false).into_data()));
                }
            }
            Op::Add => {
                for (k, &p) in ps.iter().enumerate() {
                    if want(k) {
                        contrib.push((p, g.to_vec()));
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                if want(0) {
                    contrib.push((ps[0], zip(g, b.data(), |g, y| g * y)));
                }
                if want(1) {
                    contrib.push((ps[1], zip(g, a.data(), |g, x| g * x)));
                }
            }
            Op::BiasAdd => {
                if want(0) {
                    contrib.push((ps[0], g.to_vec()));
                }
                if want(1) {
                    let w = pv(1).numel();
                    let mut db = vec![0.0; w];
                    for (k, gv) in g.iter().enumerate() {
                        db[k % w] += gv;
                    }
                    contrib.push((ps[1], db));
                }
            }
            Op::Scale(k) => contrib.push((ps[0], g.iter().map(|v| k * v).collect())),
            Op::AddScalar(_) => contrib.push((ps[0], g.to_vec())),
            Op::Relu => contrib.push((
                ps[0],
                zip(g, pv(0).data(), |g, x| if x > 0.0 { g } else { 0.0 }),
            )),
            Op::Sigmoid => contrib.push((ps[0], zip(g, out.data(), |g, y| g * y * (1.0 - y)))),
            Op::Ln => contrib.push((ps[0], zip(g, pv(0).data(), |g, x| g / x))),
            Op::Abs => contrib.push((
                ps[0],
                zip(g, pv(0).data(), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            )),
            Op::Square => contrib.push((ps[0], zip(g, pv(0).data(), |g, x| 2.0 * g * x))),
            Op::Sqrt => contrib.push((ps[0], zip(g, out.data(), |g, y| 0.5 * g / y))),
            Op::Acos => contrib.push((
                ps[0],
                zip(g, pv(0).data(), |g, x| {
                    if x > -ACOS_CLAMP && x < ACOS_CLAMP {
                        -g / libm::sqrt(1.0 - x * x)
                    } else {
                        0.0
                    }
                }),
            )),
            Op::Softmax => {
                let w = out.last_dim();
                let mut d = Vec::with_capacity(g.len());
                for r in 0..out.outer_len() {
                    let y = out.row(r);
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(y).map(|(gv, yv)| yv * (gv - dot)));
                }
                contrib.push((ps[0], d));
            }
            Op::LogSoftmax => {
                let w = out.last_dim();
                let mut d = Vec::with_capacity(g.len());
                for r in 0..out.outer_len() {
                    let ly = out.row(r);
                    let gr = &g[r * w..(r + 1) * w];
                    let total: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(ly).map(|(gv, l)| gv - libm::exp(*l) * total));
                }
                contrib.push((ps[0], d));
            }
            Op::Sum => contrib.push((ps[0], vec![g[0]; pv(0).numel()])),
            Op::Mean => {
                let n = pv(0).numel();
                contrib.push((ps[0], vec![g[0] / n as f64; n]));
            }
            Op::Concat => {
                let rows = out.outer_len();
                let w = out.last_dim();
                let mut offset = 0;
                for (k, p) in ps.iter().enumerate() {
                    let pw = pv(k).last_dim();
                    if want(k) {
                        let mut d = Vec::with_capacity(rows * pw);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * w + offset..r * w + offset + pw]);
                        }
                        contrib.push((*p, d));
                    }
                    offset += pw;
                }
            }
        }
        for (p, d) in contrib {
            if !relevant[p.0] {
                continue;
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    node: i,
                    op: node.op.name(),
                });
            }
            match &mut adj[p.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, v)| *a += v),
                slot => *slot = Some(d),
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.build(Op::Scale(k), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.build(Op::AddScalar(k), &[a])
    }
    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.build(Op::BiasAdd, &[a, bias])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::LogSoftmax, &[a])
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Ln, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Sqrt, &[a])
    }
    pub fn acos(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Acos, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Mean, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.build(Op::Concat, parts)
    }
    /// `a − b` for equal shapes.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// `op(a) · op(b)` for rank-2 tensors, with optional transposes.
fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                let brow = &bd[p * bc..(p + 1) * bc];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Applies one plain SGD step, `p ← p − lr·g`, to every parameter.
///
/// Parameter and gradient maps must have identical keys and matching shapes.
pub fn sgd_step<K: Ord + Clone + fmt::Debug>(
    params: &BTreeMap<K, Tensor>,
    grads: &BTreeMap<K, Tensor>,
    lr: f64,
) -> Result<BTreeMap<K, Tensor>> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::BadLearningRate(lr));
    }
    if params.len() != grads.len() {
        let missing = params
            .keys()
            .find(|k| !grads.contains_key(k))
            .or_else(|| grads.keys().find(|k| !params.contains_key(k)));
        return Err(Error::KeyMismatch(alloc::format!("{missing:?}")));
    }
    let mut out = BTreeMap::new();
    for (k, p) in params {
        let g = grads
            .get(k)
            .ok_or_else(|| Error::KeyMismatch(alloc::format!("{k:?}")))?;
        if !p.same_shape(g) {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let data = zip(p.data(), g.data(), |p, g| p - lr * g);
        out.insert(k.clone(), Tensor::new(p.shape().to_vec(), data)?);
    }
    Ok(out)
}

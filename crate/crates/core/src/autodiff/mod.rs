//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the handles of its inputs. Because nodes are only ever appended, the tape
//! order is a topological order and [`Graph::backward`] simply walks it in
//! reverse, visiting each node once.
//!
//! The tape is rebuilt for every forward pass. Gradients accumulate across
//! calls to `backward` until [`Graph::zero_grad`] is called; nothing is zeroed
//! implicitly.

mod gemm;
pub mod gradcheck;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub(crate) use gemm::gemm;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise binary operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Pointwise activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary(BinaryOp, Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Act(Activation, Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    TimeStep { x: Var, t: usize },
    SliceLast { x: Var, start: usize },
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Conv1d { x: Var, weight: Var, bias: Var, pad_left: usize },
    LagCombine { x: Var, weight: Var, bias: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Act(Activation::Sigmoid, _) => "sigmoid",
            Op::Act(Activation::Tanh, _) => "tanh",
            Op::Act(Activation::LeakyRelu(_), _) => "leaky_relu",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::TimeStep { .. } => "time_step",
            Op::SliceLast { .. } => "slice_last",
            Op::Stack(_) => "stack",
            Op::Concat(_) => "concat",
            Op::Conv1d { .. } => "conv1d",
            Op::LagCombine { .. } => "lag_combine",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary(_, a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Act(_, x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::TimeStep { x, .. }
            | Op::SliceLast { x, .. } => vec![*x],
            Op::Stack(vs) | Op::Concat(vs) => vs.clone(),
            Op::Conv1d { x, weight, bias, .. } | Op::LagCombine { x, weight, bias } => {
                vec![*x, *weight, *bias]
            }
        }
    }
}

/// One tape entry.
#[derive(Debug, Clone)]
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Gradient buffer; `None` until something flows into it.
    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradients of named parameters, keyed like the [`ParameterStore`] they came from.
pub type Gradients = BTreeMap<String, Tensor>;

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
    frozen_params: bool,
    bound: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects non-finite values at every op boundary.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::default()
        }
    }

    /// A graph on which parameters are bound as constants; nothing requires grad.
    pub fn inference() -> Self {
        Graph {
            frozen_params: true,
            ..Self::default()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node handle in tape order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.nodes.len()).map(Var)
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Handles of the nodes `v` was computed from.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false, "constant")
    }

    /// A free leaf that requires grad.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, "variable")
    }

    /// Binds the named parameter of `store` onto the tape. Binding the same
    /// name twice returns the same node, so shared weights share gradients.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push_leaf(value, !self.frozen_params, "param")?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradient of every bound parameter (zeros where nothing flowed).
    pub fn param_grads(&self) -> Gradients {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let node = &self.nodes[v.0];
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, op: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for 2-D operands; `b` is stored as `[c×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (r, k) = (sa[0], sa[1]);
        let (kb, c) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape(op, sa, sb));
        }
        let mut out = vec![0.0; r * c];
        gemm(
            r,
            k,
            c,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        self.push(Tensor::new([r, c], out)?, Op::MatMul { a, b, trans_b })
    }

    /// Pointwise `add`, `sub` or `mul` of equally shaped tensors.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            if op == BinaryOp::Add && is_bias_broadcast(va.shape(), vb.shape()) {
                return self.add_bias(a, b);
            }
            return Err(Error::shape(binary_name(op), va.shape(), vb.shape()));
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = va.zip_map(vb, f)?;
        self.push(out, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// Adds a vector along the last axis of `x` (one value per column), or a
    /// single-element tensor to every entry.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if !is_bias_broadcast(vx.shape(), vb.shape()) {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let width = vb.numel();
        let b = vb.data();
        let mut out = vx.clone();
        for chunk in out.data_mut().chunks_mut(width) {
            for (o, bi) in chunk.iter_mut().zip(b) {
                *o += bi;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = match kind {
            Activation::Sigmoid => self.value(x).map(sigmoid),
            Activation::Tanh => self.value(x).map(f64::tanh),
            Activation::LeakyRelu(alpha) => {
                self.value(x).map(|v| if v >= 0.0 { v } else { alpha * v })
            }
        };
        self.push(out, Op::Act(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.activation(Activation::LeakyRelu(alpha), x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    /// Row `t` of every batch entry: `[B, T, C] -> [B, C]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::shape("time_step", s, &[t]));
        }
        let (b, steps, c) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            let off = (bi * steps + t) * c;
            out.extend_from_slice(&v.data()[off..off + c]);
        }
        self.push(Tensor::new([b, c], out)?, Op::TimeStep { x, t })
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        let c = *s.last().unwrap();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_last", s, &[start, len]));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let out: Vec<f64> = v
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start })
    }

    /// Stacks `K` tensors of shape `[B, C]` into `[B, K, C]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape("stack", &s0, &[]));
        }
        for &v in xs {
            if self.shape(v) != s0.as_slice() {
                return Err(Error::shape("stack", &s0, self.shape(v)));
            }
        }
        let (b, c, k) = (s0[0], s0[1], xs.len());
        let mut out = vec![0.0; b * k * c];
        for (ki, &v) in xs.iter().enumerate() {
            let d = self.value(v).data();
            for bi in 0..b {
                out[(bi * k + ki) * c..(bi * k + ki + 1) * c]
                    .copy_from_slice(&d[bi * c..(bi + 1) * c]);
            }
        }
        self.push(Tensor::new([b, k, c], out)?, Op::Stack(xs.to_vec()))
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec()))
    }

    /// Zero-padded 1-D convolution along time, without activation.
    ///
    /// `x` is `[B, p, d]` (or `[p, d]`), `weight` is `[m, w, d]`, `bias` is `[m]`.
    /// Output row `t`, column `f` is `Σ_j ⟨weight[f, j], x[t + j − pad_left]⟩ + bias[f]`
    /// with out-of-range rows read as zero, so the output has `p` rows.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, pad_left: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        let geo = ConvGeometry::new(sx, sw).ok_or_else(|| Error::shape("conv1d", sx, sw))?;
        if sb != [geo.filters] {
            return Err(Error::shape("conv1d", sw, sb));
        }
        if pad_left >= geo.width {
            return Err(Error::Contract(format!(
                "conv1d: left padding {pad_left} must be < kernel width {}",
                geo.width
            )));
        }
        let cols = geo.im2col(self.value(x).data(), pad_left);
        let rows = geo.batch * geo.steps;
        let mut out = vec![0.0; rows * geo.filters];
        gemm(
            rows,
            geo.width * geo.channels,
            geo.filters,
            &cols,
            false,
            self.value(weight).data(),
            true,
            0.0,
            &mut out,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(geo.filters) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = geo.filters;
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x,
                weight,
                bias,
                pad_left,
            },
        )
    }

    /// Shared-weight linear combination of the most recent rows of a window.
    ///
    /// `x` is `[B, p, n]` (or `[p, n]`), `weight` is `[L]` with `L ≤ p`, `bias` is `[1]`.
    /// Output `[B, n]` holds `Σ_{j<L} weight[j] · x[p − 1 − j] + bias` per variable,
    /// so lag index 0 is the most recent row.
    pub fn lag_combine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        let (batch, steps, n) = match *sx {
            [p, n] => (1, p, n),
            [b, p, n] => (b, p, n),
            _ => return Err(Error::shape("lag_combine", sx, sw)),
        };
        if sw.len() != 1 || sw[0] > steps || sb != [1] {
            return Err(Error::shape("lag_combine", sx, sw));
        }
        let lags = sw[0];
        let (xd, w, b0) = (
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).item(),
        );
        let mut out = vec![b0; batch * n];
        for bi in 0..batch {
            let o = &mut out[bi * n..(bi + 1) * n];
            for (j, &wj) in w.iter().enumerate().take(lags) {
                let row = (bi * steps + steps - 1 - j) * n;
                for (oi, xi) in o.iter_mut().zip(&xd[row..row + n]) {
                    *oi += wj * xi;
                }
            }
        }
        let shape = if sx.len() == 2 { vec![n] } else { vec![batch, n] };
        self.push(Tensor::new(shape, out)?, Op::LagCombine { x, weight, bias })
    }

    // ---------------------------------------------------------- backward

    /// Accumulates `∂loss/∂v` into every node that requires grad.
    ///
    /// `loss` must be a `[1]`-shaped node. Gradients from multiple paths sum.
    /// Leaf gradients accumulate across calls; intermediate gradients hold the
    /// most recent pass only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar [1] root, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // intermediate buffers are per-pass scratch; only leaves accumulate
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], Contrib::Dense(Tensor::scalar(1.0)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, t) in contribs {
                accumulate(&mut self.nodes[v.0], t);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` against its inputs.
    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Contrib)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, k) = (va.shape()[0], va.shape()[1]);
                let c = g.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; r * k];
                    // dA = G·Bᵀ, or G·B when B was already transposed
                    gemm(r, c, k, g.data(), false, vb.data(), !trans_b, 0.0, &mut da);
                    out.push((*a, Contrib::Dense(Tensor::new(va.shape(), da)?)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * c];
                    if *trans_b {
                        gemm(c, r, k, g.data(), true, va.data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, r, c, va.data(), true, g.data(), false, 0.0, &mut db);
                    }
                    out.push((*b, Contrib::Dense(Tensor::new(vb.shape(), db)?)));
                }
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                match op {
                    BinaryOp::Add => {
                        if self.needs(a) {
                            out.push((a, Contrib::Dense(g.clone())));
                        }
                        if self.needs(b) {
                            out.push((b, Contrib::Dense(g.clone())));
                        }
                    }
                    BinaryOp::Sub => {
                        if self.needs(a) {
                            out.push((a, Contrib::Dense(g.clone())));
                        }
                        if self.needs(b) {
                            out.push((b, Contrib::Dense(g.map(|v| -v))));
                        }
                    }
                    BinaryOp::Mul => {
                        if self.needs(a) {
                            out.push((a, Contrib::Dense(g.zip_map(self.value(b), |gi, bi| gi * bi)?)));
                        }
                        if self.needs(b) {
                            out.push((b, Contrib::Dense(g.zip_map(self.value(a), |gi, ai| gi * ai)?)));
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    out.push((*x, Contrib::Dense(g.clone())));
                }
                if self.needs(*bias) {
                    let vb = self.value(*bias);
                    let width = vb.numel();
                    let mut db = vec![0.0; width];
                    for chunk in g.data().chunks(width) {
                        for (d, gi) in db.iter_mut().zip(chunk) {
                            *d += gi;
                        }
                    }
                    out.push((*bias, Contrib::Dense(Tensor::new(vb.shape(), db)?)));
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    out.push((*x, Contrib::Dense(g.map(|v| v * factor))));
                }
            }
            Op::Act(kind, x) => {
                if self.needs(*x) {
                    let d = match kind {
                        Activation::Sigmoid => g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?,
                        Activation::Tanh => g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?,
                        Activation::LeakyRelu(alpha) => g.zip_map(self.value(*x), |gi, xi| {
                            if xi >= 0.0 {
                                gi
                            } else {
                                alpha * gi
                            }
                        })?,
                    };
                    out.push((*x, Contrib::Dense(d)));
                }
            }
            Op::Square(x) => {
                if self.needs(*x) {
                    out.push((*x, Contrib::Dense(g.zip_map(self.value(*x), |gi, xi| 2.0 * gi * xi)?)));
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    out.push((*x, Contrib::Dense(g.zip_map(self.value(*x), |gi, xi| gi * sign(xi))?)));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    out.push((*x, Contrib::Dense(Tensor::full(self.shape(*x), g.item()))));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    out.push((*x, Contrib::Dense(g.clone().reshape(self.shape(*x).to_vec())?)));
                }
            }
            Op::TimeStep { x, t } => {
                if self.needs(*x) {
                    out.push((*x, Contrib::TimeStep { t: *t, g: g.clone() }));
                }
            }
            Op::SliceLast { x, start } => {
                if self.needs(*x) {
                    out.push((*x, Contrib::SliceLast { start: *start, g: g.clone() }));
                }
            }
            Op::Stack(xs) => {
                let (b, k, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (ki, &v) in xs.iter().enumerate() {
                    if !self.needs(v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(b * c);
                    for bi in 0..b {
                        d.extend_from_slice(&g.data()[(bi * k + ki) * c..(bi * k + ki + 1) * c]);
                    }
                    out.push((v, Contrib::Dense(Tensor::new([b, c], d)?)));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    if self.needs(v) {
                        let d = g.data()[off..off + len].to_vec();
                        out.push((v, Contrib::Dense(Tensor::new(self.shape(v), d)?)));
                    }
                    off += len;
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                pad_left,
            } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*weight))
                    .expect("validated in forward");
                let rows = geo.batch * geo.steps;
                let kd = geo.width * geo.channels;
                if self.needs(*weight) {
                    let cols = geo.im2col(self.value(*x).data(), *pad_left);
                    let mut dw = vec![0.0; geo.filters * kd];
                    gemm(geo.filters, rows, kd, g.data(), true, &cols, false, 0.0, &mut dw);
                    out.push((*weight, Contrib::Dense(Tensor::new(self.shape(*weight), dw)?)));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * kd];
                    gemm(
                        rows,
                        geo.filters,
                        kd,
                        g.data(),
                        false,
                        self.value(*weight).data(),
                        false,
                        0.0,
                        &mut dcols,
                    );
                    let dx = geo.col2im(&dcols, *pad_left);
                    out.push((*x, Contrib::Dense(Tensor::new(self.shape(*x), dx)?)));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; geo.filters];
                    for row in g.data().chunks(geo.filters) {
                        for (d, gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                    out.push((*bias, Contrib::Dense(Tensor::new([geo.filters], db)?)));
                }
            }
            Op::LagCombine { x, weight, bias } => {
                let sx = self.shape(*x);
                let (batch, steps, n) = match *sx {
                    [p, n] => (1, p, n),
                    [b, p, n] => (b, p, n),
                    _ => unreachable!("validated in forward"),
                };
                let xd = self.value(*x).data();
                let w = self.value(*weight).data();
                let gd = g.data();
                if self.needs(*weight) {
                    let mut dw = vec![0.0; w.len()];
                    for (j, d) in dw.iter_mut().enumerate() {
                        for bi in 0..batch {
                            let row = (bi * steps + steps - 1 - j) * n;
                            *d += gd[bi * n..(bi + 1) * n]
                                .iter()
                                .zip(&xd[row..row + n])
                                .map(|(gi, xi)| gi * xi)
                                .sum::<f64>();
                        }
                    }
                    out.push((*weight, Contrib::Dense(Tensor::new([w.len()], dw)?)));
                }
                if self.needs(*bias) {
                    out.push((*bias, Contrib::Dense(Tensor::scalar(g.sum()))));
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(sx);
                    let dxd = dx.data_mut();
                    for bi in 0..batch {
                        for (j, &wj) in w.iter().enumerate() {
                            let row = (bi * steps + steps - 1 - j) * n;
                            for (d, gi) in dxd[row..row + n].iter_mut().zip(&gd[bi * n..(bi + 1) * n]) {
                                *d += wj * gi;
                            }
                        }
                    }
                    out.push((*x, Contrib::Dense(dx)));
                }
            }
        }
        Ok(out)
    }
}

/// A gradient contribution. Scatter variants touch only the slice their
/// forward op read, so no full-size buffer is built per contribution.
enum Contrib {
    Dense(Tensor),
    /// `g: [B, C]` into step `t` of a `[B, T, C]` input.
    TimeStep { t: usize, g: Tensor },
    /// `g: [.., len]` into columns `start..start + len` of the last axis.
    SliceLast { start: usize, g: Tensor },
}

fn accumulate(node: &mut Node, c: Contrib) {
    let c = match (c, &mut node.grad) {
        (Contrib::Dense(t), None) => {
            node.grad = Some(t);
            return;
        }
        (Contrib::Dense(t), Some(acc)) => {
            acc.add_assign(&t);
            return;
        }
        (c, _) => c,
    };
    let shape = node.value.shape().to_vec();
    let acc = node.grad.get_or_insert_with(|| Tensor::zeros(shape.as_slice()));
    match c {
        Contrib::TimeStep { t, g } => {
            let (steps, width) = (shape[1], shape[2]);
            let d = acc.data_mut();
            for (bi, grow) in g.data().chunks(width).enumerate() {
                let off = (bi * steps + t) * width;
                for (a, b) in d[off..off + width].iter_mut().zip(grow) {
                    *a += b;
                }
            }
        }
        Contrib::SliceLast { start, g } => {
            let width = *shape.last().unwrap();
            let len = *g.shape().last().unwrap();
            for (drow, grow) in acc.data_mut().chunks_mut(width).zip(g.data().chunks(len)) {
                for (a, b) in drow[start..start + len].iter_mut().zip(grow) {
                    *a += b;
                }
            }
        }
        Contrib::Dense(_) => unreachable!(),
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

fn is_bias_broadcast(x: &[usize], b: &[usize]) -> bool {
    let width: usize = b.iter().product();
    b.len() == 1 && (width == 1 || x.last() == Some(&width))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shapes of a conv1d application, with the batch axis made explicit.
struct ConvGeometry {
    batch: usize,
    steps: usize,
    channels: usize,
    filters: usize,
    width: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize]) -> Option<Self> {
        let (batch, steps, channels) = match *x {
            [p, d] => (1, p, d),
            [b, p, d] => (b, p, d),
            _ => return None,
        };
        let [filters, width, wd] = *w else {
            return None;
        };
        (wd == channels).then_some(ConvGeometry {
            batch,
            steps,
            channels,
            filters,
            width,
        })
    }

    /// `[B·p, w·d]` patch matrix with zero rows outside the sequence.
    fn im2col(&self, x: &[f64], pad_left: usize) -> Vec<f64> {
        let (p, d, w) = (self.steps, self.channels, self.width);
        let mut cols = vec![0.0; self.batch * p * w * d];
        for b in 0..self.batch {
            for t in 0..p {
                let dst = (b * p + t) * w * d;
                for j in 0..w {
                    let Some(src) = (t + j).checked_sub(pad_left).filter(|&s| s < p) else {
                        continue;
                    };
                    let s = (b * p + src) * d;
                    cols[dst + j * d..dst + (j + 1) * d].copy_from_slice(&x[s..s + d]);
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], pad_left: usize) -> Vec<f64> {
        let (p, d, w) = (self.steps, self.channels, self.width);
        let mut x = vec![0.0; self.batch * p * d];
        for b in 0..self.batch {
            for t in 0..p {
                let src = (b * p + t) * w * d;
                for j in 0..w {
                    let Some(row) = (t + j).checked_sub(pad_left).filter(|&s| s < p) else {
                        continue;
                    };
                    let dst = (b * p + row) * d;
                    for (xv, cv) in x[dst..dst + d].iter_mut().zip(&cols[src + j * d..src + (j + 1) * d]) {
                        *xv += cv;
                    }
                }
            }
        }
        x
    }
}

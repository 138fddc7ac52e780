use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Exp,
    Log,
    Relu,
    Sqrt,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        /// Per-output flat input indices, present only when broadcasting.
        index: Option<(Vec<usize>, Vec<usize>)>,
    },
    Unary(Unary, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Reduce {
        kind: Reduction,
        input: Var,
        axis: Option<usize>,
    },
    Max {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    SelectSum {
        input: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it; [`Tape::backward`] walks the record in exact reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Flat index into `shape` for every element of `out_shape`, with size-1
/// dimensions of `shape` repeated.
fn broadcast_index(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    let numel: usize = out_shape.iter().product();
    let mut counter = vec![0usize; rank];
    let mut out = Vec::with_capacity(numel);
    let mut flat = 0usize;
    for _ in 0..numel {
        out.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if kind == Binary::Div {
            if let Some(&z) = b.data().iter().find(|&&y| y == 0.0) {
                return Err(Error::Domain { op: "div", value: z });
            }
        }
        let (value, index) = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(a.shape().to_vec(), data)?, None)
        } else {
            let out_shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape("broadcast", a.shape(), b.shape()))?;
            let ia = broadcast_index(&out_shape, a.shape());
            let ib = broadcast_index(&out_shape, b.shape());
            let data = ia
                .iter()
                .zip(&ib)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect();
            (Tensor::new(out_shape, data)?, Some((ia, ib)))
        };
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(value, Op::Binary { kind, lhs, rhs, index }, rg))
    }

    /// Elementwise sum with broadcasting over size-1 dimensions of equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = match kind {
            Unary::Log | Unary::Sqrt => {
                let op = if kind == Unary::Log { "log" } else { "sqrt" };
                let bad = |v: f64| if kind == Unary::Log { v <= 0.0 } else { v < 0.0 };
                if let Some(&v) = t.data().iter().find(|&&v| bad(v) || v.is_nan()) {
                    return Err(Error::Domain { op, value: v });
                }
                t.map(if kind == Unary::Log { f64::ln } else { f64::sqrt })
            }
            Unary::Sigmoid => t.map(stable_sigmoid),
            Unary::Exp => t.map(f64::exp),
            Unary::Relu => t.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Softplus => t.map(softplus),
            Unary::Neg => t.map(|v| -v),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Unary(kind, x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    /// `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine { input: x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Reduces over `axis`, keeping it with extent 1; `None` reduces to shape `[1]`.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            self.check_axis("reduce", x, a)?;
        }
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (outer, len, inner) = match axis {
            Some(a) => split_axis(&shape, a),
            None => (1, t.len(), 1),
        };
        let out_shape = match axis {
            Some(a) => {
                let mut s = shape.clone();
                s[a] = 1;
                s
            }
            None => vec![1],
        };
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + r;
                let slot = o * inner + r;
                match kind {
                    Reduction::Sum | Reduction::Mean => {
                        let s: f64 = (0..len).map(|l| t.data()[idx(l)]).sum();
                        out[slot] = if kind == Reduction::Mean { s / len as f64 } else { s };
                    }
                    Reduction::Max => {
                        let mut best = idx(0);
                        for l in 1..len {
                            if t.data()[idx(l)] > t.data()[best] {
                                best = idx(l);
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = t.data()[best];
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        let op = match kind {
            Reduction::Max => Op::Max { input: x, argmax },
            _ => Op::Reduce { kind, input: x, axis },
        };
        Ok(self.push(value, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Reduction::Sum, None).expect("full reduction is infallible")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, Reduction::Mean, None).expect("full reduction is infallible")
    }

    fn check_mask(x: &Tensor, mask: &Tensor) -> Result<()> {
        let want: &[usize] = if x.rank() >= 2 {
            &x.shape()[x.rank() - 2..]
        } else {
            x.shape()
        };
        if mask.shape() != want {
            return Err(Error::shape("masked_softmax", x.shape(), mask.shape()));
        }
        if let Some(&bad) = mask
            .data()
            .iter()
            .find(|&&m| m != 0.0 && m != f64::NEG_INFINITY)
        {
            return Err(Error::Invalid(format!(
                "mask entries must be 0 or -inf, found {bad}"
            )));
        }
        Ok(())
    }

    /// Softmax over the last axis with an optional additive `{0, -inf}` mask
    /// shaped like the trailing two dimensions of `x`.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            Self::check_mask(t, m)?;
        }
        let cols = t.cols();
        let rows = t.len() / cols;
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let src = &t.data()[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mrow = mask.map(|m| {
                let mr = m.len() / cols;
                &m.data()[(r % mr) * cols..(r % mr + 1) * cols]
            });
            for c in 0..cols {
                dst[c] = src[c] + mrow.map_or(0.0, |m| m[c]);
            }
            let max = dst.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for v in dst.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                what: "narrow",
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { input: x, axis, start }, rg))
    }

    /// Stacks the listed rows (first-axis slices) of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        if rows.is_empty() {
            return Err(Error::Invalid("gather of zero rows".into()));
        }
        let w = t.len() / n;
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar sum of selected flat elements, accumulated in the listed order.
    pub fn select_sum(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut acc = 0.0;
        for (k, &i) in indices.iter().enumerate() {
            let v = *t.data().get(i).ok_or(Error::IndexOutOfRange {
                what: "element",
                index: i,
                len: t.len(),
            })?;
            acc = if k == 0 { v } else { v + acc };
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SelectSum {
                input: x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Clears gradients from a previous [`Tape::backward`].
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradient of the last backward pass; `None` if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    /// Reverse sweep from a scalar `loss`, seeding it with gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        let nodes = &self.nodes;
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                Self::backward_node(&mut grads, nodes, node, g.data());
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(grads: &mut [Option<Tensor>], nodes: &[Node], node: &Node, g: &[f64]) {
        let val = |v: Var| &nodes[v.0].value;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let p = val(b).shape()[1];
                Self::accumulate(grads, nodes, a, |ga| matmul_bt_into(g, val(b).data(), ga, m, p, k));
                Self::accumulate(grads, nodes, b, |gb| matmul_at_into(val(a).data(), g, gb, m, k, p));
            }
            Op::Binary {
                kind,
                lhs,
                rhs,
                index,
            } => {
                let (a, b) = (val(*lhs).data(), val(*rhs).data());
                let n = g.len();
                let ia = |o: usize| index.as_ref().map_or(o, |(x, _)| x[o]);
                let ib = |o: usize| index.as_ref().map_or(o, |(_, x)| x[o]);
                Self::accumulate(grads, nodes, *lhs, |ga| {
                    for o in 0..n {
                        ga[ia(o)] += match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * b[ib(o)],
                            Binary::Div => g[o] / b[ib(o)],
                        };
                    }
                });
                Self::accumulate(grads, nodes, *rhs, |gb| {
                    for o in 0..n {
                        gb[ib(o)] += match kind {
                            Binary::Add => g[o],
                            Binary::Sub => -g[o],
                            Binary::Mul => g[o] * a[ia(o)],
                            Binary::Div => -g[o] * a[ia(o)] / (b[ib(o)] * b[ib(o)]),
                        };
                    }
                });
            }
            &Op::Unary(kind, x) => {
                let xs = val(x).data();
                Self::accumulate(grads, nodes, x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i]
                            * match kind {
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Exp => y[i],
                                Unary::Log => 1.0 / xs[i],
                                Unary::Relu => {
                                    if xs[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sqrt => 0.5 / y[i],
                                Unary::Softplus => stable_sigmoid(xs[i]),
                                Unary::Neg => -1.0,
                            };
                    }
                });
            }
            &Op::Affine { input, scale } => {
                Self::accumulate(grads, nodes, input, |gx| {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi * scale;
                    }
                });
            }
            &Op::Reduce { kind, input, axis } => {
                let shape = val(input).shape();
                let (outer, len, inner) = match axis {
                    Some(a) => split_axis(shape, a),
                    None => (1, val(input).len(), 1),
                };
                let f = if kind == Reduction::Mean { 1.0 / len as f64 } else { 1.0 };
                Self::accumulate(grads, nodes, input, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for r in 0..inner {
                                gx[(o * len + l) * inner + r] += g[o * inner + r] * f;
                            }
                        }
                    }
                });
            }
            Op::Max { input, argmax } => {
                Self::accumulate(grads, nodes, *input, |gx| {
                    for (slot, &src) in argmax.iter().enumerate() {
                        gx[src] += g[slot];
                    }
                });
            }
            &Op::Softmax(x) => {
                let cols = node.value.cols();
                Self::accumulate(grads, nodes, x, |gx| {
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                Self::accumulate(grads, nodes, x, |gx| {
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dr[c] += gr[c] - yr[c].exp() * total;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = val(v).shape()[*axis] * inner;
                    Self::accumulate(grads, nodes, v, |gx| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, s) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
                Self::accumulate(grads, nodes, x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                Self::accumulate(grads, nodes, x, |gx| {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            &Op::Narrow { input, axis, start } => {
                let (outer, extent, inner) = split_axis(val(input).shape(), axis);
                let len = node.value.shape()[axis];
                Self::accumulate(grads, nodes, input, |gx| {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let w = node.value.len() / rows.len();
                Self::accumulate(grads, nodes, *input, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..w {
                            gx[r * w + c] += g[k * w + c];
                        }
                    }
                });
            }
            Op::SelectSum { input, indices } => {
                Self::accumulate(grads, nodes, *input, |gx| {
                    for &i in indices {
                        gx[i] += g[0];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_oracle() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = t.constant(Tensor::identity(2));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let b = t.constant(mat(&[&[5.0], &[6.0]]));
        let d = t.matmul(a, b).unwrap();
        assert_eq!(t.value(d).data(), &[17.0, 39.0]);
        let err = t.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7; 3]).unwrap());
        let s = t.softmax(x).unwrap();
        for &p in t.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(mat(&[&[2.0, 5.0]]));
        let mask = mat(&[&[0.0, f64::NEG_INFINITY]]);
        let s = t.masked_softmax(x, Some(&mask)).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 0.0]);
        let full = mat(&[&[f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        assert!(matches!(
            t.masked_softmax(x, Some(&full)),
            Err(Error::DegenerateRow { row: 0 })
        ));
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.softmax(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &p) in t.value(s).data().iter().enumerate() {
            assert!((p - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        t.backward(s).unwrap();
        assert!((t.grad(x).unwrap().item() - 0.25).abs() < 1e-9);
        let m = t.constant(Tensor::scalar(-3.0));
        let r = t.relu(m).unwrap();
        assert_eq!(t.value(r).item(), 0.0);
        let z = t.constant(Tensor::scalar(0.0));
        assert!(matches!(t.log(z), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0, 1.0, 3.0]).unwrap());
        let s = t.sum(x);
        assert_eq!(t.value(s).item(), 7.0);
        let m = t.reduce(x, Reduction::Max, Some(0)).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
        let c = t.constant(Tensor::full(&[2, 3], 4.5));
        let mean = t.mean(c);
        assert_eq!(t.value(mean).item(), 4.5);
        assert!(t.reduce(c, Reduction::Sum, Some(2)).is_err());
    }

    #[test]
    fn concat_and_reshape() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[2, 3], 1.0));
        let b = t.constant(Tensor::full(&[2, 5], 2.0));
        let only = t.concat(&[a], 1).unwrap();
        assert_eq!(t.value(only), t.value(a));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 8]);
        assert!(t.concat(&[a, b], 0).is_err());
        let x = t.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let r = t.reshape(x, &[3, 2]).unwrap();
        let back = t.reshape(r, &[2, 3]).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn backward_linear_and_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
        assert!(matches!(t.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let unused = t.leaf(Tensor::full(&[2, 2], 1.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.grad_or_zeros(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn broadcast_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let row = t.leaf(Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap());
        let col = t.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = t.add(a, row).unwrap();
        assert_eq!(t.value(b).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let c = t.mul(b, col).unwrap();
        let l = t.sum(c);
        t.backward(l).unwrap();
        assert_eq!(t.grad(row).unwrap().data(), &[3.0, 3.0, 3.0]);
        assert_eq!(t.grad(col).unwrap().data(), &[63.0, 72.0]);
        let bad = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, bad).is_err());
    }
}

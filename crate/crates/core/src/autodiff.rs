//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in creation order, so parents always
//! precede children and a single reverse sweep visits each node once.
//! Handles to recorded values are [`Var`]s. Leaves created with
//! `requires_grad = true` receive `∂loss/∂leaf` after [`Tape::backward`];
//! repeated backward calls accumulate.
//!
//! Variance reductions use the population convention (divide by `N`).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{broadcast_shape, for_each_broadcast, matmul_nt_raw, matmul_raw, matmul_tn_raw};
use crate::{Error, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in gather index maps: the output element is zero.
pub const ZERO_FILL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Sqrt(Var),
    Abs(Var),
    Silu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Softmax(Var, usize),
    /// Sum over the axes flagged `true`, keeping them as size 1.
    Sum(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A copy of `v` cut off from the tape; never accumulates gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; out_shape.iter().product()];
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        for_each_broadcast(va.shape(), vb.shape(), &out_shape, |i, ia, ib| {
            out[i] = f(da[ia], db[ib]);
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::MulScalar(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(math::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Clamp to `[lo, hi]`. Gradient is identity on the closed interval and
    /// zero outside it.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(math::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * sigmoid(v));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: shape.len() });
        }
        let (r, c) = (shape[0], shape[1]);
        let index = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(a, index, &[c, r])
    }

    // ---- reductions ----------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let (outer, n, inner) = split_axis(va.shape(), axis)?;
        let src = va.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = math::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a, axis), rg))
    }

    /// Sum over `axes`, keeping reduced dimensions with size 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mask = axis_mask(&shape, axes)?;
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&mask)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let mut out = vec![0.0; out_shape.iter().product()];
        let src = self.value(a).data();
        for_each_broadcast(&shape, &out_shape, &shape, |i, _, io| out[io] += src[i]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Sum(a), rg))
    }

    /// Mean over `axes`, keeping reduced dimensions with size 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let count: usize = axes.iter().filter_map(|&ax| shape.get(ax)).product();
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        let s = self.sum_axes(a, axes)?;
        Ok(self.mul_scalar(s, 1.0 / count as f64))
    }

    /// Mean and population variance over `axes`, both kept-dim and
    /// differentiable.
    pub fn reduce_stats(&mut self, a: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let mean = self.mean_axes(a, axes)?;
        let centered = self.sub(a, mean)?;
        let sq = self.square(centered);
        let var = self.mean_axes(sq, axes)?;
        Ok((mean, var))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let rank = self.shape(a).len();
        let axes: Vec<usize> = (0..rank).collect();
        let s = self.sum_axes(a, &axes).expect("valid axes");
        self.reshape(s, &[]).expect("single element")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyReduction);
        }
        let s = self.sum_all(a);
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == ZERO_FILL`.
    /// Backward scatters gradients back through the same map.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::ElementCount {
                shape: shape.to_vec(),
                expected: n,
                actual: index.len(),
            });
        }
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&j| j != ZERO_FILL && j >= src.len()) {
            return Err(crate::invalid!("gather index {bad} out of range {}", src.len()));
        }
        let out = index
            .iter()
            .map(|&j| if j == ZERO_FILL { 0.0 } else { src[j] })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather(a, index), rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn select_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(crate::invalid!("select_cols {start}+{len} on shape {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let index = (0..rows * len).map(|i| (i / len) * cols + start + i % len).collect();
        self.gather(a, index, &[rows, len])
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(Error::EmptyReduction)?).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis { axis, rank: first.len() });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulate `∂loss/∂leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.rg(loss) {
            adj[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let g = match adj.get_mut(id).and_then(Option::take) {
                Some(g) => g,
                None => vec![0.0; node.value.numel()],
            };
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(&shape, g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let unary = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..g.len()).map(|i| g[i] * f(i)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (xa, xb) = (va.data(), vb.data());
                let mut ga = self.rg(*a).then(|| vec![0.0; xa.len()]);
                let mut gb = self.rg(*b).then(|| vec![0.0; xb.len()]);
                for_each_broadcast(va.shape(), vb.shape(), node.value.shape(), |i, ia, ib| {
                    let (da, db) = match op {
                        BinaryOp::Add => (g[i], g[i]),
                        BinaryOp::Sub => (g[i], -g[i]),
                        BinaryOp::Mul => (g[i] * xb[ib], g[i] * xa[ia]),
                        BinaryOp::Div => (g[i] / xb[ib], -g[i] * xa[ia] / (xb[ib] * xb[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    send(*a, ga);
                }
                if let Some(gb) = gb {
                    send(*b, gb);
                }
            }
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::MulScalar(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::Tanh(a) => send(*a, unary(&|i| 1.0 - y[i] * y[i])),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                send(*a, unary(&|i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 }))
            }
            Op::Sqrt(a) => send(*a, unary(&|i| if y[i] > 0.0 { 0.5 / y[i] } else { 0.0 })),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                send(*a, unary(&|i| if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 }))
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    unary(&|i| {
                        let s = sigmoid(x[i]);
                        s * (1.0 + x[i] * (1.0 - s))
                    }),
                )
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                send(*a, unary(&|i| gelu_grad(x[i])))
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    send(*a, matmul_nt_raw(g, vb.data(), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, matmul_tn_raw(va.data(), g, m, k, n));
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked");
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*a, gx);
            }
            Op::Sum(a) => {
                let in_shape = self.shape(*a);
                let mut gx = vec![0.0; self.value(*a).numel()];
                for_each_broadcast(in_shape, node.value.shape(), in_shape, |i, _, io| gx[i] = g[io]);
                send(*a, gx);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Gather(a, index) => {
                let mut gx = vec![0.0; self.value(*a).numel()];
                for (i, &j) in index.iter().enumerate() {
                    if j != ZERO_FILL {
                        gx[j] += g[i];
                    }
                }
                send(*a, gx);
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                    }
                    send(p, gp);
                    offset += chunk;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis { axis, rank: shape.len() });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn axis_mask(shape: &[usize], axes: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() {
            return Err(Error::InvalidAxis { axis: ax, rank: shape.len() });
        }
        mask[ax] = true;
    }
    Ok(mask)
}

/// Central finite-difference gradient of a scalar function of one tensor.
/// Test and verification helper, deliberately independent of the tape.
pub fn finite_difference(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &[f64]| math::sqrt(t.iter().map(|v| v * v).sum());
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

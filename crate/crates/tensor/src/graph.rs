//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents, so node ids are a topological order by construction.
//! [`Graph::backward`] walks the tape in reverse and sums gradient
//! contributions per node.

use std::fmt;

use crate::element::{gemm, Element};
use crate::error::{invalid, Result, TensorError};
use crate::tensor::{inverse_permutation, split_at_axis, ReduceKind, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed outside the tape and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp<T: Element>: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the upstream gradient of the output.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Scale(Var, T),
    AddScalar(Var),
    Reduce { x: Var, axes: Vec<usize>, kind: ReduceKind },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    AddBias { x: Var, bias: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Reduce { .. } => "reduce",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::AddBias { .. } => "add_bias",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reduce { x, .. }
            | Op::Narrow { x, .. }
            | Op::LogSoftmax { x, .. } => vec![*x],
            Op::MatMul { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

/// Gradient store produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline]
fn gelu<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g)?,
    });
    Ok(())
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation tag and parent ids of a node, for inspection.
    pub fn node_info(&self, v: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.tag(), op.parents())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.derived(value, Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.derived(value, Op::Reshape { x }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.derived(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.derived(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.derived(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.derived(value, Op::Div(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(value, Op::Relu(x))
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.derived(value, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.derived(value, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        self.derived(value, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.derived(value, Op::AddScalar(x))
    }

    pub fn reduce(&mut self, x: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let value = self.value(x).reduce(axes, kind)?;
        Ok(self.derived(value, Op::Reduce { x, axes: axes.to_vec(), kind }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, ReduceKind::Sum)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, ReduceKind::Mean)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        Ok(self.derived(value, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?.contiguous();
        Ok(self.derived(value, Op::Narrow { x, axis, start }))
    }

    /// Adds the vector `bias` along `axis` of `x` (an explicit broadcast; the
    /// elementwise ops never broadcast implicitly).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if axis >= xv.rank() || bv.rank() != 1 || bv.shape()[0] != xv.shape()[axis] {
            return invalid(format!("bias {:?} does not match axis {axis} of {:?}", bv.shape(), xv.shape()));
        }
        let (_, n, inner) = split_at_axis(xv.shape(), axis);
        let b = bv.data();
        let mut data = xv.to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % n];
        }
        let value = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.derived(value, Op::AddBias { x, bias, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return invalid(format!("softmax axis {axis} out of range for rank {}", xv.rank()));
        }
        let (outer, n, inner) = split_at_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..n).map(|i| (src[at(i)] - m).exp()).sum::<T>().ln();
                for i in 0..n {
                    out[at(i)] = src[at(i)] - lse;
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.derived(value, Op::LogSoftmax { x, axis }))
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.derived(output, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one. Contributions from multiple consumers are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            for (parent, pg) in self.vjp(node, &g)? {
                accumulate(&mut grads[parent.0], pg)?;
            }
            // Intermediate gradients are dropped once propagated; leaves keep theirs.
            grads[id] = None;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Like [`Graph::backward`] but keeps gradients of every node.
    pub fn backward_all(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let g = match (&grads[id], node.requires_grad) {
                (Some(g), true) => g.clone(),
                _ => continue,
            };
            for (parent, pg) in self.vjp(node, &g)? {
                accumulate(&mut grads[parent.0], pg)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Permute { x, axes } => {
                out.push((*x, g.permute(&inverse_permutation(axes))?.contiguous()));
            }
            Op::Reshape { x } => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = vec![T::zero(); av.numel()];
                    gemm(T::one(), g.mat_ref(), bv.mat_ref().t(), T::zero(), &mut da);
                    out.push((*a, Tensor::from_vec(av.shape(), da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bv.numel()];
                    gemm(T::one(), av.mat_ref().t(), g.mat_ref(), T::zero(), &mut db);
                    out.push((*b, Tensor::from_vec(bv.shape(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if self.needs(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.mul(self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, g.mul(self.value(*a))?));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    out.push((*a, g.zip_map(bv, |gi, bi| gi / bi)?));
                }
                if self.needs(*b) {
                    let gy = g.mul(&node.value)?;
                    out.push((*b, gy.zip_map(bv, |v, bi| -v / bi)?));
                }
            }
            Op::Relu(x) => {
                out.push((*x, g.zip_map(self.value(*x), |gi, xi| if xi > T::zero() { gi } else { T::zero() })?));
            }
            Op::Gelu(x) => out.push((*x, g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad(xi))?)),
            Op::Exp(x) => out.push((*x, g.mul(&node.value)?)),
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Reduce { x, axes, kind } => {
                let xv = self.value(*x);
                let count: usize = axes.iter().map(|&d| xv.shape()[d]).product();
                let expanded = g.expand_axes(xv.shape(), axes);
                let gx = match kind {
                    ReduceKind::Sum => expanded,
                    ReduceKind::Mean => expanded.scale(T::of(1.0 / count as f64)),
                    ReduceKind::Var => {
                        let mean = xv.reduce(axes, ReduceKind::Mean)?.expand_axes(xv.shape(), axes);
                        let centered = xv.sub(&mean)?;
                        let k = T::of(2.0 / count as f64);
                        expanded.zip_map(&centered, |gi, ci| gi * ci * k)?
                    }
                };
                out.push((*x, gx));
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        out.push((x, g.narrow(*axis, start, len)?.contiguous()));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_at_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let src = g.data();
                let mut dx = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::from_vec(&shape, dx)?));
            }
            Op::AddBias { x, bias, axis } => {
                out.push((*x, g.clone()));
                if self.needs(*bias) {
                    let others: Vec<usize> = (0..g.rank()).filter(|d| d != axis).collect();
                    out.push((*bias, g.reduce(&others, ReduceKind::Sum)?));
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_at_axis(g.shape(), *axis);
                let (gd, y) = (g.data(), node.value.data());
                let mut dx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let gsum: T = (0..n).map(|i| gd[at(i)]).sum();
                        for i in 0..n {
                            dx[at(i)] = gd[at(i)] - y[at(i)].exp() * gsum;
                        }
                    }
                }
                out.push((*x, Tensor::from_vec(g.shape(), dx)?));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = op.backward(&values, &node.value, g, &needs)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::InvalidArgument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for ((&v, gi), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        if gi.shape() != self.shape(v) {
                            return invalid(format!(
                                "custom op {} gradient shape {:?} != input shape {:?}",
                                op.name(),
                                gi.shape(),
                                self.shape(v)
                            ));
                        }
                        out.push((v, gi));
                    }
                }
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        Ok(out)
    }
}

//! Eager reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and fills a
//! gradient buffer for every node that (transitively) depends on a tensor
//! with `requires_grad`. A graph lives for one forward/backward pass.

use super::{ParamStore, Tensor};
use crate::error::{LgdError, Result};

/// Clamp applied to `log` inputs and division denominators.
pub const LOG_EPS: f32 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    /// Natural log of `max(x, LOG_EPS)`.
    Log,
    Exp,
    Neg,
    /// Square root of `max(x, 0)`.
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Ties resolve to the lowest flat index.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    AddScalar {
        x: Var,
    },
    ClampMin {
        x: Var,
        lo: f32,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        /// Input stride pattern mapping each input element to its output slot.
        map: ReduceMap,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Pool2d {
        x: Var,
        kind: PoolKind,
        argmax: Vec<u32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bindings: Vec<(Var, String)>,
}

impl Graph {
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
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Adds a named parameter from `store`; its gradient can later be
    /// written back with [`Graph::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| LgdError::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let var = self.leaf(t.clone());
        self.bindings.push((var, name.to_string()));
        Ok(var)
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

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Accumulates gradients of bound parameters into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (var, name) in &self.bindings {
            if let Some(g) = self.grad(*var) {
                if let Some(p) = store.get_mut(name) {
                    if p.requires_grad() {
                        p.accumulate_grad(g)?;
                    }
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // elementwise

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let src = self.value(x);
        let data: Vec<f32> = match kind {
            UnaryKind::Relu => src.data().iter().map(|&v| v.max(0.0)).collect(),
            UnaryKind::Sigmoid => src.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Log => src.data().iter().map(|&v| v.max(LOG_EPS).ln()).collect(),
            UnaryKind::Exp => src.data().iter().map(|&v| v.exp()).collect(),
            UnaryKind::Neg => src.data().iter().map(|&v| -v).collect(),
            UnaryKind::Sqrt => src.data().iter().map(|&v| v.max(0.0).sqrt()).collect(),
            UnaryKind::Square => src.data().iter().map(|&v| v * v).collect(),
        };
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, value: f32) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v + value).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    /// `max(x, lo)`; the gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f32) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(lo)).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::ClampMin { x, lo }, rg)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0f32; plan.numel()];
        let f: fn(f32, f32) -> f32 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y.max(LOG_EPS),
        };
        plan.for_each(|o, i, j| out[o] = f(av[i], bv[j]));
        let value = Tensor::new(&plan.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { a, b, kind }, rg))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// `a / max(b, LOG_EPS)`; meant for nonnegative denominators.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    // ------------------------------------------------------------------
    // shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LgdError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(LgdError::InvalidShape(format!(
                "concat axis {axis} for rank {}",
                base.len()
            )));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(LgdError::InvalidShape(format!(
                    "cannot concat {s:?} with {base:?} along axis {axis}"
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk: usize = t.shape()[axis..].iter().product();
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // reductions

    /// Reduces over `axes` (all axes when empty); reduced axes are removed.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let map = ReduceMap::new(&shape, axes)?;
        let src = self.value(x).data();
        let mut argmax = Vec::new();
        let data: Vec<f32> = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![0f64; map.out_numel];
                map.for_each(|i, o| acc[o] += f64::from(src[i]));
                let div = if kind == ReduceKind::Mean {
                    map.group as f64
                } else {
                    1.0
                };
                acc.into_iter().map(|v| (v / div) as f32).collect()
            }
            ReduceKind::Max => {
                if map.group == 0 {
                    return Err(LgdError::InvalidShape("max over an empty axis".into()));
                }
                argmax = vec![usize::MAX; map.out_numel];
                let mut best = vec![f32::NEG_INFINITY; map.out_numel];
                map.for_each(|i, o| {
                    if argmax[o] == usize::MAX || src[i] > best[o] {
                        best[o] = src[i];
                        argmax[o] = i;
                    }
                });
                best
            }
        };
        let value = Tensor::new(&map.out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                kind,
                map,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axes)
    }

    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Max, axes)
    }

    // ------------------------------------------------------------------
    // neural-network primitives

    /// Row-wise softmax of a `[N, C]` tensor, evaluated with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(LgdError::InvalidShape(format!(
                "softmax expects [N, C], got {shape:?}"
            )));
        }
        let c = shape[1];
        let src = self.value(x).data();
        let mut out = vec![0f32; src.len()];
        for (row, dst) in src.chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
            let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (d, e) in dst.iter_mut().zip(exps) {
                *d = (e / total) as f32;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// 2-D convolution of `[N, C, H, W]` by `[K, C, kh, kw]` plus bias `[K]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = geom.im2col(self.value(x).data());
        let out = geom.forward(&cols, self.value(w).data(), self.value(b).data());
        let value = Tensor::new(&geom.out_shape(), out)?;
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Affine map `x · w + b` for `x: [N, D]`, `w: [D, M]`, `b: [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(LgdError::InvalidShape(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let xd = to_f64(self.value(x).data());
        let wd = to_f64(self.value(w).data());
        let mut out = vec![0f64; n * m];
        gemm(n, d, m, &xd, (d, 1), &wd, (m, 1), &mut out, (m, 1), false);
        let bias = self.value(b).data();
        let data = out
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &bb)| (v + f64::from(bb)) as f32))
            .collect();
        let value = Tensor::new(&[n, m], data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Non-overlapping 2x2 pooling of `[N, C, H, W]` with even `H`, `W`.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(LgdError::InvalidShape(format!(
                "2x2 pooling needs [N, C, even H, even W], got {shape:?}"
            )));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0f32; planes * ho * wo];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0u32; out.len()];
        }
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let o = (p * ho + i) * wo + j;
                    let taps = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    match kind {
                        PoolKind::Max => {
                            let mut best = taps[0];
                            for &t in &taps[1..] {
                                if src[t] > src[best] {
                                    best = t;
                                }
                            }
                            out[o] = src[best];
                            argmax[o] = best as u32;
                        }
                        PoolKind::Avg => {
                            let s: f64 = taps.iter().map(|&t| f64::from(src[t])).sum();
                            out[o] = (s / 4.0) as f32;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[shape[0], shape[1], ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Pool2d { x, kind, argmax }, rg))
    }

    // ------------------------------------------------------------------
    // backward

    /// Back-propagates from a scalar `loss`. Gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(LgdError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut work);
            work[i] = Some(g);
        }
        for (i, g) in work.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], work: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let dx: Vec<f32> = match kind {
                    UnaryKind::Relu => zip_map(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryKind::Sigmoid => zip_map(g, out, |g, y| g * y * (1.0 - y)),
                    UnaryKind::Log => {
                        zip_map(g, xv, |g, x| if x > LOG_EPS { g / x } else { 0.0 })
                    }
                    UnaryKind::Exp => zip_map(g, out, |g, y| g * y),
                    UnaryKind::Neg => g.iter().map(|v| -v).collect(),
                    UnaryKind::Sqrt => zip_map(g, out, |g, y| {
                        if y > 0.0 {
                            g / (2.0 * y.max(LOG_EPS))
                        } else {
                            0.0
                        }
                    }),
                    UnaryKind::Square => zip_map(g, xv, |g, x| 2.0 * g * x),
                };
                accumulate(work, *x, dx);
            }
            Op::Scale { x, factor } => {
                if self.rg(*x) {
                    accumulate(work, *x, g.iter().map(|v| v * factor).collect());
                }
            }
            Op::ClampMin { x, lo } => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    accumulate(work, *x, zip_map(g, xv, |g, x| if x > *lo { g } else { 0.0 }));
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if self.rg(*x) {
                    accumulate(work, *x, g.to_vec());
                }
            }
            Op::Binary { a, b, kind } => self.binary_backward(*a, *b, *kind, g, work),
            Op::Reduce {
                x,
                kind,
                map,
                argmax,
            } => {
                if !self.rg(*x) {
                    return;
                }
                let mut dx = vec![0f32; map.in_numel];
                match kind {
                    ReduceKind::Sum => map.for_each(|i, o| dx[i] = g[o]),
                    ReduceKind::Mean => {
                        let inv = 1.0 / map.group as f32;
                        map.for_each(|i, o| dx[i] = g[o] * inv);
                    }
                    ReduceKind::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            dx[i] += g[o];
                        }
                    }
                }
                accumulate(work, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let total_chunk: usize = node.value.shape()[*axis..].iter().product();
                for &p in parts {
                    let chunk: usize = self.shape(p)[*axis..].iter().product();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(chunk * outer);
                        for o in 0..outer {
                            let start = o * total_chunk + offset;
                            dp.extend_from_slice(&g[start..start + chunk]);
                        }
                        accumulate(work, p, dp);
                    }
                    offset += chunk;
                }
            }
            Op::Softmax { x } => {
                if !self.rg(*x) {
                    return;
                }
                let c = node.value.shape()[1].max(1);
                let mut dx = vec![0f32; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = gr
                        .iter()
                        .zip(yr)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (f64::from(yv) * (f64::from(gv) - dot)) as f32;
                    }
                }
                accumulate(work, *x, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let dout = geom.dout_matrix(g);
                if self.rg(*b) {
                    let mut db = vec![0f64; geom.k];
                    for (k, row) in dout.chunks(geom.n * geom.p()).enumerate() {
                        db[k] = row.iter().sum();
                    }
                    accumulate(work, *b, to_f32(&db));
                }
                if self.rg(*w) {
                    accumulate(work, *w, geom.weight_grad(&dout, cols));
                }
                if self.rg(*x) {
                    accumulate(work, *x, geom.input_grad(&dout, self.value(*w).data()));
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let m = self.shape(*w)[1];
                let gd = to_f64(g);
                if self.rg(*b) {
                    let mut db = vec![0f64; m];
                    for row in gd.chunks(m.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(work, *b, to_f32(&db));
                }
                if self.rg(*w) {
                    // dW[d, m] = x^T[d, n] · g[n, m]
                    let xd = to_f64(self.value(*x).data());
                    let mut dw = vec![0f64; d * m];
                    gemm(d, n, m, &xd, (1, d), &gd, (m, 1), &mut dw, (m, 1), false);
                    accumulate(work, *w, to_f32(&dw));
                }
                if self.rg(*x) {
                    // dX[n, d] = g[n, m] · W^T[m, d]
                    let wd = to_f64(self.value(*w).data());
                    let mut dx = vec![0f64; n * d];
                    gemm(n, m, d, &gd, (m, 1), &wd, (1, m), &mut dx, (d, 1), false);
                    accumulate(work, *x, to_f32(&dx));
                }
            }
            Op::Pool2d { x, kind, argmax } => {
                if !self.rg(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let mut dx = vec![0f32; self.value(*x).numel()];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src as usize] += g[o];
                        }
                    }
                    PoolKind::Avg => {
                        let (h, w) = (xs[2], xs[3]);
                        let (ho, wo) = (h / 2, w / 2);
                        for (o, &gv) in g.iter().enumerate() {
                            let p = o / (ho * wo);
                            let (i, j) = ((o / wo) % ho, o % wo);
                            let base = p * h * w + 2 * i * w + 2 * j;
                            for t in [base, base + 1, base + w, base + w + 1] {
                                dx[t] += gv * 0.25;
                            }
                        }
                    }
                }
                accumulate(work, *x, dx);
            }
        }
    }

    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        kind: BinaryKind,
        g: &[f32],
        work: &mut [Option<Vec<f32>>],
    ) {
        let (need_a, need_b) = (self.rg(a), self.rg(b));
        if !need_a && !need_b {
            return;
        }
        let plan = Broadcast::new(self.shape(a), self.shape(b)).expect("validated in forward");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut da = vec![0f64; if need_a { av.len() } else { 0 }];
        let mut db = vec![0f64; if need_b { bv.len() } else { 0 }];
        plan.for_each(|o, i, j| {
            let gv = f64::from(g[o]);
            let (x, y) = (f64::from(av[i]), f64::from(bv[j]));
            let (ga, gb) = match kind {
                BinaryKind::Add => (gv, gv),
                BinaryKind::Sub => (gv, -gv),
                BinaryKind::Mul => (gv * y, gv * x),
                BinaryKind::Div => {
                    let eps = f64::from(LOG_EPS);
                    if y > eps {
                        (gv / y, -gv * x / (y * y))
                    } else {
                        (gv / eps, 0.0)
                    }
                }
            };
            if need_a {
                da[i] += ga;
            }
            if need_b {
                db[j] += gb;
            }
        });
        if need_a {
            accumulate(work, a, to_f32(&da));
        }
        if need_b {
            accumulate(work, b, to_f32(&db));
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(work: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
    match &mut work[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += *b),
        slot => *slot = Some(delta),
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// `c = a · b` (or `c += a · b` when `accumulate`), all row/column strides
/// given explicitly so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m.max(1) - 1) * a_strides.0 + (k.max(1) - 1) * a_strides.1);
    assert!(b.len() >= (k.max(1) - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() > (m - 1) * c_strides.0 + (n - 1) * c_strides.1);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Numpy-style broadcast of two shapes.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(LgdError::InvalidShape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )));
            }
            out_shape.push(x.max(y));
        }
        let strides = |p: &[usize]| -> Vec<usize> {
            let mut s = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                s[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            s
        };
        Ok(Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let numel = self.numel();
        if numel == 0 {
            return;
        }
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut o = 0;
        loop {
            for t in 0..inner {
                f(o + t, ia + t * sa, ib + t * sb);
            }
            o += inner;
            if o >= numel {
                break;
            }
            // advance the outer multi-index
            let mut d = last;
            loop {
                d -= 1;
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Maps input elements of a reduction to their output slot.
#[derive(Debug)]
struct ReduceMap {
    in_shape: Vec<usize>,
    /// Output stride of each input axis (0 for reduced axes).
    out_strides: Vec<usize>,
    out_shape: Vec<usize>,
    out_numel: usize,
    in_numel: usize,
    group: usize,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![axes.is_empty(); rank];
        for &a in axes {
            if a >= rank {
                return Err(LgdError::InvalidShape(format!(
                    "axis {a} out of range for shape {shape:?}"
                )));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&d| !reduced[d])
            .map(|d| shape[d])
            .collect();
        let mut out_strides = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            if !reduced[d] {
                out_strides[d] = acc;
                acc *= shape[d];
            }
        }
        let group = (0..rank).filter(|&d| reduced[d]).map(|d| shape[d]).product();
        Ok(Self {
            in_shape: shape.to_vec(),
            out_strides,
            out_numel: out_shape.iter().product(),
            in_numel: shape.iter().product(),
            out_shape,
            group,
        })
    }

    /// Calls `f(input_index, output_index)` in input row-major order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let rank = self.in_shape.len();
        if self.in_numel == 0 {
            return;
        }
        if rank == 0 {
            f(0, 0);
            return;
        }
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        for i in 0..self.in_numel {
            f(i, o);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                o += self.out_strides[d];
                if idx[d] < self.in_shape[d] {
                    break;
                }
                o -= self.out_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Geometry of one convolution call.
#[derive(Debug, Clone)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || b.len() != 1 {
            return Err(LgdError::InvalidShape(format!(
                "conv2d: input {x:?}, weight {w:?}, bias {b:?}"
            )));
        }
        if x[1] != w[1] {
            return Err(LgdError::InvalidShape(format!(
                "conv2d: input has {} channels, weight expects {}",
                x[1], w[1]
            )));
        }
        if b[0] != w[0] {
            return Err(LgdError::InvalidShape(format!(
                "conv2d: bias length {} for {} filters",
                b[0], w[0]
            )));
        }
        if stride == 0 {
            return Err(LgdError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (hp, wp) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if w[2] > hp || w[3] > wp || w[2] == 0 || w[3] == 0 {
            return Err(LgdError::InvalidShape(format!(
                "conv2d: kernel {}x{} exceeds padded input {hp}x{wp}",
                w[2], w[3]
            )));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            k: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            padding,
            ho: (hp - w[2]) / stride + 1,
            wo: (wp - w[3]) / stride + 1,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.ho, self.wo]
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Calls `f(row, column, channel, plane_offset)` for every in-bounds tap
    /// of one sample; padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            f(row, oi * self.wo + oj, ch, ii as usize * self.w + jj as usize);
                        }
                    }
                }
            }
        }
    }

    /// Column matrix `[C·kh·kw, N·P]` in 64-bit.
    fn im2col(&self, x: &[f32]) -> Vec<f64> {
        let (p, np) = (self.p(), self.n * self.p());
        let plane = self.h * self.w;
        let mut cols = vec![0f64; self.ckk() * np];
        for s in 0..self.n {
            let xs = &x[s * self.c * plane..(s + 1) * self.c * plane];
            self.for_each_tap(|row, col, ch, off| {
                cols[row * np + s * p + col] = f64::from(xs[ch * plane + off]);
            });
        }
        cols
    }

    fn forward(&self, cols: &[f64], w: &[f32], b: &[f32]) -> Vec<f32> {
        let (ckk, np, p) = (self.ckk(), self.n * self.p(), self.p());
        let wd = to_f64(w);
        let mut mat = vec![0f64; self.k * np];
        gemm(self.k, ckk, np, &wd, (ckk, 1), cols, (np, 1), &mut mat, (np, 1), false);
        let mut out = vec![0f32; self.n * self.k * p];
        for k in 0..self.k {
            let bias = f64::from(b[k]);
            for s in 0..self.n {
                let src = &mat[k * np + s * p..k * np + (s + 1) * p];
                let dst = &mut out[(s * self.k + k) * p..(s * self.k + k + 1) * p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v + bias) as f32;
                }
            }
        }
        out
    }

    /// Reorders an output gradient `[N, K, P]` into `[K, N·P]`.
    fn dout_matrix(&self, g: &[f32]) -> Vec<f64> {
        let (p, np) = (self.p(), self.n * self.p());
        let mut d = vec![0f64; self.k * np];
        for s in 0..self.n {
            for k in 0..self.k {
                let src = &g[(s * self.k + k) * p..(s * self.k + k + 1) * p];
                let dst = &mut d[k * np + s * p..k * np + (s + 1) * p];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a = f64::from(b);
                }
            }
        }
        d
    }

    fn weight_grad(&self, dout: &[f64], cols: &[f64]) -> Vec<f32> {
        let (ckk, np) = (self.ckk(), self.n * self.p());
        let mut dw = vec![0f64; self.k * ckk];
        // dW[K, CKK] = D[K, NP] · cols^T[NP, CKK]
        gemm(self.k, np, ckk, dout, (np, 1), cols, (1, np), &mut dw, (ckk, 1), false);
        to_f32(&dw)
    }

    fn input_grad(&self, dout: &[f64], w: &[f32]) -> Vec<f32> {
        let (ckk, np, p) = (self.ckk(), self.n * self.p(), self.p());
        let wd = to_f64(w);
        let mut dcols = vec![0f64; ckk * np];
        // dCols[CKK, NP] = W^T[CKK, K] · D[K, NP]
        gemm(ckk, self.k, np, &wd, (1, ckk), dout, (np, 1), &mut dcols, (np, 1), false);
        let plane = self.h * self.w;
        let mut dx = vec![0f64; self.n * self.c * plane];
        for s in 0..self.n {
            let dxs = &mut dx[s * self.c * plane..(s + 1) * self.c * plane];
            self.for_each_tap(|row, col, ch, off| {
                dxs[ch * plane + off] += dcols[row * np + s * p + col];
            });
        }
        to_f32(&dx)
    }
}

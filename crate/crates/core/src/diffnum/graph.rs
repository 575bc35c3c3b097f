//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward call appends one node holding its value and the recorded
//! operation. Nodes are only ever appended after their inputs, so walking the
//! tape backwards is a reverse topological order and each node is visited once.

use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, split_axis};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u32,
    idx: u32,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Square,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    AvgPool { x: Var, axis: usize, width: usize, stride: usize },
    Interp { x: Var, axis: usize },
    Conv1d { x: Var, w: Var, stride: usize },
    Cosine { a: Var, b: Var, eps: f64 },
    L2Norm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Values live on the tape until it is dropped.
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.graph, self.graph, "gradient lookup with a variable from another graph");
        self.grads[v.idx as usize].as_ref()
    }

    /// Gradient of `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx as usize]))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph: self.id, idx }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the current value into a new constant leaf, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = format!("{kind:?}").to_lowercase();
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| shape_err(&name, sa, sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = kernels::broadcast_offsets(sa, &out_shape);
            let ob = kernels::broadcast_offsets(sb, &out_shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary(kind, a, b), rg))
    }

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

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = |v: f64| match kind {
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Tanh => v.tanh(),
            Unary::Sigmoid => kernels::sigmoid(v),
            Unary::Relu => v.max(0.0),
            Unary::Gelu => kernels::gelu(v),
            Unary::Square => v * v,
            Unary::Sqrt => v.sqrt(),
        };
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    // ---- linear algebra ------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `[b,m,k] x [b,k,n] -> [b,m,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::matmul_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b), rg))
    }

    /// Applies `x @ w + b` over the last axis of `x`, keeping leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap();
        let rows = numel(&shape) / last;
        let x2 = self.reshape(x, &[rows, last])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, &out_shape)
    }

    // ---- shape manipulation --------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("permute: axes {axes:?} invalid for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.value(x).data(), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?).to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Picks entries along `axis` by index; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("index_select", &shape, axis)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::Shape(format!(
                "index_select: indices out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::IndexSelect(x, axis, idx.to_vec()), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    /// Extends `axis` by repeating the edge entries.
    pub fn pad_replicate(&mut self, x: Var, axis: usize, left: usize, right: usize) -> Result<Var> {
        check_axis("pad_replicate", self.shape(x), axis)?;
        let n = self.shape(x)[axis];
        let idx: Vec<usize> = (0..left + n + right)
            .map(|j| (j as isize - left as isize).clamp(0, n as isize - 1) as usize)
            .collect();
        self.index_select(x, axis, &idx)
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it (a 1-d input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    // ---- last-axis normalizations ------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            for r in row.iter_mut() {
                *r /= s;
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
            for r in row.iter_mut() {
                *r -= lse;
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for r in row.iter_mut() {
                *r = (*r - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm(x, inv_std), rg)
    }

    /// Cosine similarity along the last axis; each norm is floored at `eps`.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("cosine", &sa, &sb));
        }
        let cols = *sa.last().unwrap();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = va
            .chunks(cols)
            .zip(vb.chunks(cols))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let na = x.iter().map(|p| p * p).sum::<f64>().sqrt().max(eps);
                let nb = y.iter().map(|q| q * q).sum::<f64>().sqrt().max(eps);
                dot / (na * nb)
            })
            .collect();
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Cosine { a, b, eps }, rg))
    }

    /// Euclidean norm along the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let cols = *shape.last().unwrap();
        let data: Vec<f64> = v.data().chunks(cols).map(|r| r.iter().map(|p| p * p).sum::<f64>().sqrt()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(out_shape, data), Op::L2Norm(x), rg)
    }

    // ---- temporal operators --------------------------------------------------------

    /// Unpadded moving average along `axis`:
    /// `out[j] = mean(x[j*stride .. j*stride + width])`.
    pub fn avg_pool(&mut self, x: Var, axis: usize, width: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("avg_pool", &shape, axis)?;
        if width == 0 || stride == 0 || shape[axis] < width {
            return Err(Error::Shape(format!(
                "avg_pool: width {width}, stride {stride} invalid for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let out_len = (len - width) / stride + 1;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * out_len * inner];
        let inv = 1.0 / width as f64;
        for o in 0..outer {
            for j in 0..out_len {
                let dst = &mut data[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                for t in j * stride..j * stride + width {
                    let row = &src[(o * len + t) * inner..(o * len + t + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(row) {
                        *d += s;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = out_len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::AvgPool { x, axis, width, stride }, rg))
    }

    /// Linear resampling along `axis` to `out_len` samples (half-sample centers,
    /// edge-clamped).
    pub fn interp_linear(&mut self, x: Var, axis: usize, out_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("interp_linear", &shape, axis)?;
        if out_len == 0 {
            return Err(Error::Shape("interp_linear: zero output length".into()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            for j in 0..out_len {
                let (i0, i1, w) = kernels::interp_coord(j, len, out_len);
                let r0 = &src[(o * len + i0) * inner..(o * len + i0 + 1) * inner];
                let r1 = &src[(o * len + i1) * inner..(o * len + i1 + 1) * inner];
                let dst = &mut data[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                for ((d, p), q) in dst.iter_mut().zip(r0).zip(r1) {
                    *d = (1.0 - w) * p + w * q;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = out_len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Interp { x, axis }, rg))
    }

    /// Unpadded strided 1-d convolution: `x [b,l,cin]`, `w [k,cin,cout]` ->
    /// `[b,(l-k)/stride+1,cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sx[1] < sw[0] || stride == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (b, l, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let lout = (l - k) / stride + 1;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * lout * cout];
        for bi in 0..b {
            for j in 0..lout {
                let start = (bi * l + j * stride) * cin;
                let patch = &vx[start..start + k * cin];
                let dst = &mut out[(bi * lout + j) * cout..(bi * lout + j + 1) * cout];
                kernels::matmul_acc(patch, vw, dst, 1, k * cin, cout);
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(vec![b, lout, cout], out), Op::Conv1d { x, w, stride }, rg))
    }

    // ---- composites ----------------------------------------------------------------

    /// Multi-head scaled dot-product attention. `q [b,tq,d]`, `k`/`v [b,tk,d]`.
    /// `mask`, when given, is an additive `[tq,tk]` bias (use `-inf`-like values
    /// to block positions).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Tensor>) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || !sq[2].is_multiple_of(heads) {
            return Err(shape_err("attention", &sq, &sk));
        }
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        let dh = d / heads;
        let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, t, heads, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * heads, t, dh])
        };
        let qh = split(self, q, tq)?;
        let kh = split(self, k, tk)?;
        let vh = split(self, v, tk)?;
        let kt = self.permute(kh, &[0, 2, 1])?;
        let scores = self.bmm(qh, kt)?;
        let mut scores = self.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(shape_err("attention mask", m.shape(), &[tq, tk]));
            }
            let mv = self.constant(m.clone());
            scores = self.add(scores, mv)?;
        }
        let probs = self.softmax(scores);
        let ctx = self.bmm(probs, vh)?;
        let ctx = self.reshape(ctx, &[b, heads, tq, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        self.reshape(ctx, &[b, tq, d])
    }

    // ---- reverse pass ----------------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id {
            return Err(Error::Backward("loss was recorded on a different graph".into()));
        }
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss does not depend on any trainable leaf".into()));
        }
        let n = loss.idx as usize + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx as usize] = Some(Tensor::full(root.value.shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        let node = &self.nodes[v.idx as usize];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape());
        match &mut grads[v.idx as usize] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to the shape of `v`.
    fn unbroadcast(&self, v: Var, out_shape: &[usize], g: &[f64]) -> Tensor {
        let shape = self.shape(v);
        if shape == out_shape {
            return Tensor::from_parts(shape.to_vec(), g.to_vec());
        }
        let offs = kernels::broadcast_offsets(shape, out_shape);
        let mut acc = vec![0.0; numel(shape)];
        for (&o, &gv) in offs.iter().zip(g) {
            acc[o] += gv;
        }
        Tensor::from_parts(shape.to_vec(), acc)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = out.shape();
                let (va, vb) = (self.value(a), self.value(b));
                let same = va.shape() == vb.shape();
                let (oa, ob) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (
                        kernels::broadcast_offsets(va.shape(), out_shape),
                        kernels::broadcast_offsets(vb.shape(), out_shape),
                    )
                };
                let at = |i: usize, v: &Tensor, offs: &[usize]| if same { v.data()[i] } else { v.data()[offs[i]] };
                if self.requires_grad(a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * at(i, vb, &ob)).collect(),
                        Binary::Div => (0..gd.len()).map(|i| gd[i] / at(i, vb, &ob)).collect(),
                    };
                    let t = self.unbroadcast(a, out_shape, &ga);
                    self.accumulate(grads, a, t);
                }
                if self.requires_grad(b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|v| -v).collect(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * at(i, va, &oa)).collect(),
                        Binary::Div => (0..gd.len())
                            .map(|i| {
                                let y = at(i, vb, &ob);
                                -gd[i] * at(i, va, &oa) / (y * y)
                            })
                            .collect(),
                    };
                    let t = self.unbroadcast(b, out_shape, &gb);
                    self.accumulate(grads, b, t);
                }
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x).data();
                let y = out.data();
                let data: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / vx[i],
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Relu => {
                                if vx[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => kernels::gelu_grad(vx[i]),
                            Unary::Square => 2.0 * vx[i],
                            Unary::Sqrt => 0.5 / y[i],
                        };
                        gd[i] * d
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_bt_acc(gd, self.value(*b).data(), &mut ga, m, k, n);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_acc(self.value(*a).data(), gd, &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.requires_grad(*a) {
                    let vb = self.value(*b).data();
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::matmul_bt_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(sa, ga));
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).data();
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::matmul_at_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(sb, gb));
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let data = permute_data(gd, out.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), data));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut data = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for l in 0..len {
                        data[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::Softmax(x) => {
                let cols = *out.shape().last().unwrap();
                let mut data = vec![0.0; gd.len()];
                for ((dst, y), gr) in data.chunks_mut(cols).zip(out.data().chunks(cols)).zip(gd.chunks(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for i in 0..cols {
                        dst[i] = y[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::LogSoftmax(x) => {
                let cols = *out.shape().last().unwrap();
                let mut data = vec![0.0; gd.len()];
                for ((dst, y), gr) in data.chunks_mut(cols).zip(out.data().chunks(cols)).zip(gd.chunks(cols)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..cols {
                        dst[i] = gr[i] - y[i].exp() * s;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::LayerNorm(x, inv_std) => {
                let cols = *out.shape().last().unwrap();
                let mut data = vec![0.0; gd.len()];
                for (r, ((dst, y), gr)) in
                    data.chunks_mut(cols).zip(out.data().chunks(cols)).zip(gd.chunks(cols)).enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                    for i in 0..cols {
                        dst[i] = inv_std[r] * (gr[i] - mg - y[i] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &x in xs {
                    let shape = self.shape(x).to_vec();
                    let len = shape[*axis];
                    if self.requires_grad(x) {
                        let mut data = Vec::with_capacity(numel(&shape));
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, x, Tensor::from_parts(shape, data));
                    }
                    offset += len;
                }
            }
            Op::IndexSelect(x, axis, idx) => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut data = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &gd[(o * idx.len() + j) * inner..(o * idx.len() + j + 1) * inner];
                        let dst = &mut data[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::AvgPool { x, axis, width, stride } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let out_len = out.shape()[*axis];
                let inv = 1.0 / *width as f64;
                let mut data = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for j in 0..out_len {
                        let src = &gd[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                        for t in j * stride..j * stride + width {
                            let dst = &mut data[(o * len + t) * inner..(o * len + t + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::Interp { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let out_len = out.shape()[*axis];
                let mut data = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for j in 0..out_len {
                        let (i0, i1, w) = kernels::interp_coord(j, len, out_len);
                        let src = &gd[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                        for (c, s) in src.iter().enumerate() {
                            data[(o * len + i0) * inner + c] += (1.0 - w) * s;
                            data[(o * len + i1) * inner + c] += w * s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::Conv1d { x, w, stride } => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (b, l, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let lout = out.shape()[1];
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut gx = if need_x { vec![0.0; b * l * cin] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; k * cin * cout] } else { Vec::new() };
                for bi in 0..b {
                    for j in 0..lout {
                        let start = (bi * l + j * stride) * cin;
                        let go = &gd[(bi * lout + j) * cout..(bi * lout + j + 1) * cout];
                        if need_w {
                            kernels::matmul_at_acc(&vx[start..start + k * cin], go, &mut gw, 1, k * cin, cout);
                        }
                        if need_x {
                            kernels::matmul_bt_acc(go, vw, &mut gx[start..start + k * cin], 1, k * cin, cout);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::from_parts(sx, gx));
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::from_parts(sw, gw));
                }
            }
            Op::Cosine { a, b, eps } => {
                let shape = self.shape(*a).to_vec();
                let cols = *shape.last().unwrap();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for r in 0..va.len() / cols {
                    let x = &va[r * cols..(r + 1) * cols];
                    let y = &vb[r * cols..(r + 1) * cols];
                    let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                    let (na, nb) = (nx.max(*eps), ny.max(*eps));
                    let s = out.data()[r];
                    let gr = gd[r];
                    for i in 0..cols {
                        let mut da = y[i] / (na * nb);
                        if nx > *eps {
                            da -= s * x[i] / (na * na);
                        }
                        let mut db = x[i] / (na * nb);
                        if ny > *eps {
                            db -= s * y[i] / (nb * nb);
                        }
                        ga[r * cols + i] = gr * da;
                        gb[r * cols + i] = gr * db;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape.clone(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
            }
            Op::L2Norm(x) => {
                let shape = self.shape(*x).to_vec();
                let cols = *shape.last().unwrap();
                let vx = self.value(*x).data();
                let mut data = vec![0.0; vx.len()];
                for r in 0..vx.len() / cols {
                    let n = out.data()[r];
                    if n > 0.0 {
                        for i in 0..cols {
                            data[r * cols + i] = gd[r] * vx[r * cols + i] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = kernels::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every op appends a node holding its output. Nodes are appended in
//! evaluation order, so walking the list backwards is a valid topological
//! order for the backward pass and each node is visited exactly once.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{broadcast_zip, reduce_to_shape, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct Csr<T> {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Element> Csr<T> {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                let end = values.len() - 1;
                values[end] = values[end] + v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    fn apply(&self, x: &[T], width: usize, transpose: bool) -> Vec<T> {
        let out_rows = if transpose { self.cols } else { self.rows };
        let mut out = vec![T::zero(); out_rows * width];
        for r in 0..self.rows {
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, v) = (self.col_idx[e], self.values[e]);
                let (dst, src) = if transpose { (c, r) } else { (r, c) };
                for f in 0..width {
                    out[dst * width + f] = out[dst * width + f] + v * x[src * width + f];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Elu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    SumAll(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Arc<Vec<usize>> },
    ScatterAddRows { x: Var, index: Arc<Vec<usize>> },
    SegmentSoftmax { x: Var, segment: Arc<Vec<usize>> },
    SpMM { x: Var, matrix: Arc<Csr<T>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-variable gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// `[outer, axis_len, inner]` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // Ops whose inputs are all constants collapse into constants.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(out, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = broadcast_zip(name, self.value(a), self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1 2D convolution, `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, pad)?;
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &g);
        let rg = self.any_grad(&[x, w]);
        let t = Tensor::new([g.batch, g.cout, g.out_h(), g.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, pad }, rg))
    }

    fn conv_geom(&self, x: Var, w: Var, pad: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let ok = sx.len() == 4
            && sw.len() == 4
            && sx[1] == sw[1]
            && sw[2] == sw[3]
            && pad < sw[2]
            && sx[2] + 2 * pad >= sw[2]
            && sx[3] + 2 * pad >= sw[3];
        if !ok {
            return Err(shape_err("conv2d", sx, sw));
        }
        Ok(ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad,
        })
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2", &s, &[2, 2]));
        }
        let (out, argmax) = kernels::max_pool2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.any_grad(&[x]);
        let t = Tensor::new([s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2", &s, &[4]));
        }
        let out = kernels::upsample2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.any_grad(&[x]);
        let t = Tensor::new([s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(t, Op::Upsample2(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { alpha * (v.exp() - T::one()) },
            Op::Elu(x, alpha),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, move |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_value(x, axis, false)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_value(x, axis, true)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    fn softmax_value(&self, x: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(shape_err("softmax", t.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
                let denom = (0..len).fold(T::zero(), |s, j| s + (src[at(j)] - max).exp());
                let log_denom = denom.ln();
                for j in 0..len {
                    let shifted = src[at(j)] - max;
                    out[at(j)] = if log {
                        shifted - log_denom
                    } else {
                        shifted.exp() / denom
                    };
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(shape_err("sum", &shape, &[a]));
            }
            shape[a] = 1;
        }
        let out = reduce_to_shape(self.value(x), &shape);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, T::one() / T::from_usize(count.max(1)).unwrap()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Select rows of a rank-2 tensor: `out[e] = x[index[e]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("gather_rows", &s, &[index.len()]));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index.iter() {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([index.len(), s[1]], data)?, Op::GatherRows { x, index }, rg))
    }

    /// Sum rows into `rows` buckets: `out[index[e]] += x[e]`.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_add_rows", &s, &[index.len(), rows]));
        }
        let width = s[1];
        let mut data = vec![T::zero(); rows * width];
        let src = self.value(x).data();
        for (e, &r) in index.iter().enumerate() {
            for f in 0..width {
                data[r * width + f] = data[r * width + f] + src[e * width + f];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([rows, width], data)?, Op::ScatterAddRows { x, index }, rg))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segment: Arc<Vec<usize>>, segments: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != segment.len() || segment.iter().any(|&g| g >= segments) {
            return Err(shape_err("segment_softmax", &s, &[segment.len(), segments]));
        }
        let width = s[1];
        let src = self.value(x).data();
        let mut max = vec![T::neg_infinity(); segments * width];
        for (e, &g) in segment.iter().enumerate() {
            for f in 0..width {
                max[g * width + f] = max[g * width + f].max(src[e * width + f]);
            }
        }
        let mut out: Vec<T> = (0..src.len())
            .map(|i| (src[i] - max[segment[i / width] * width + i % width]).exp())
            .collect();
        let mut denom = vec![T::zero(); segments * width];
        for (i, &v) in out.iter().enumerate() {
            let d = &mut denom[segment[i / width] * width + i % width];
            *d = *d + v;
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v / denom[segment[i / width] * width + i % width];
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(s, out)?, Op::SegmentSoftmax { x, segment }, rg))
    }

    /// Constant sparse matrix times a dense `[m, f]` variable.
    pub fn spmm(&mut self, matrix: Arc<Csr<T>>, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != matrix.cols {
            return Err(shape_err("spmm", &[matrix.rows, matrix.cols], &s));
        }
        let out = matrix.apply(self.value(x).data(), s[1], false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([matrix.rows, s[1]], out)?, Op::SpMM { x, matrix }, rg))
    }

    /// Batch normalization of `[n, c, h, w]` with batch statistics:
    /// `gamma · (x − μ_c) / √(σ²_c + eps) + beta`, where `gamma` and `beta`
    /// are `[1, c, 1, 1]`. Also returns the per-channel batch mean and
    /// biased variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [1, s[1], 1, 1] || self.shape(beta) != [1, s[1], 1, 1] {
            return Err(shape_err("batch_norm", &s, self.shape(gamma)));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = T::from_usize(n * plane).unwrap();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let block = |b: usize| &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let m = (0..n).fold(T::zero(), |acc, b| acc + block(b).iter().fold(T::zero(), |a, &v| a + v)) / count;
            let v = (0..n).fold(T::zero(), |acc, b| {
                acc + block(b).iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m))
            }) / count;
            mean[ch] = m;
            var[ch] = v;
            inv_std[ch] = T::one() / (v + eps).sqrt();
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *h = (v - m) * is;
                    *o = *h * g + be;
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let xhat = Tensor::new(s.clone(), xhat)?;
        let y = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((y, mean, var))
    }

    /// Accumulate `∂loss/∂v` for every variable that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        let map_with = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            let xv = self.value(x).data();
            let data = g
                .data()
                .iter()
                .zip(xv)
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            Tensor::new(y.shape().to_vec(), data).expect("same shape")
        };
        let zip = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            broadcast_zip("grad", a, b, f).expect("broadcast-compatible in forward")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, self.shape(*a))),
                (*b, reduce_to_shape(g, self.shape(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to_shape(g, self.shape(*a))),
                (*b, reduce_to_shape(&g.map(|v| -v), self.shape(*b))),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip(g, vb, &|gv, bv| gv * bv);
                let gb = zip(g, va, &|gv, av| gv * av);
                vec![
                    (*a, reduce_to_shape(&ga, va.shape())),
                    (*b, reduce_to_shape(&gb, vb.shape())),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip(g, vb, &|gv, bv| gv / bv);
                // d(a/b)/db = -y / b
                let gy = zip(g, y, &|gv, yv| gv * yv);
                let gb = zip(&gy, vb, &|gyv, bv| -gyv / bv);
                vec![
                    (*a, reduce_to_shape(&ga, va.shape())),
                    (*b, reduce_to_shape(&gb, vb.shape())),
                ]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ga = kernels::matmul(g.data(), self.value(*b).data(), m, n, k, false, true);
                let gb = kernels::matmul(self.value(*a).data(), g.data(), k, m, n, true, false);
                vec![
                    (*a, Tensor::new([m, k], ga).unwrap()),
                    (*b, Tensor::new([k, n], gb).unwrap()),
                ]
            }
            Op::Conv2d { x, w, pad } => {
                let geom = self.conv_geom(*x, *w, *pad).expect("validated in forward");
                let mut out = Vec::new();
                if self.requires_grad(*x) {
                    let dx = kernels::conv2d_grad_input(self.value(*w).data(), g.data(), &geom);
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap()));
                }
                if self.requires_grad(*w) {
                    let dw = kernels::conv2d_grad_weight(self.value(*x).data(), g.data(), &geom);
                    out.push((*w, Tensor::new(self.shape(*w).to_vec(), dw).unwrap()));
                }
                out
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                vec![(*x, dx)]
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let dx = kernels::upsample2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                vec![(*x, Tensor::new(s.to_vec(), dx).unwrap())]
            }
            Op::Relu(x) => vec![(*x, map_with(*x, &|gv, xv, _| if xv > T::zero() { gv } else { T::zero() }))],
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                vec![(*x, map_with(*x, &|gv, xv, _| if xv > T::zero() { gv } else { gv * slope }))]
            }
            Op::Elu(x, alpha) => {
                let alpha = *alpha;
                vec![(
                    *x,
                    map_with(*x, &|gv, xv, yv| if xv > T::zero() { gv } else { gv * (yv + alpha) }),
                )]
            }
            Op::Sigmoid(x) => vec![(*x, map_with(*x, &|gv, _, yv| gv * yv * (T::one() - yv)))],
            Op::Exp(x) => vec![(*x, map_with(*x, &|gv, _, yv| gv * yv))],
            Op::Log(x) => vec![(*x, map_with(*x, &|gv, xv, _| gv / xv))],
            Op::Sqrt(x) => {
                let half = T::from_f64_lossy(0.5);
                vec![(*x, map_with(*x, &|gv, _, yv| gv * half / yv))]
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *x,
                    map_with(*x, &|gv, xv, _| if xv >= lo && xv <= hi { gv } else { T::zero() }),
                )]
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        if log {
                            let gsum = (0..len).fold(T::zero(), |s, j| s + gd[at(j)]);
                            for j in 0..len {
                                dx[at(j)] = gd[at(j)] - yd[at(j)].exp() * gsum;
                            }
                        } else {
                            let dot = (0..len).fold(T::zero(), |s, j| s + gd[at(j)] * yd[at(j)]);
                            for j in 0..len {
                                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx).unwrap())]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    offset += len;
                    out.push((v, Tensor::new(self.shape(v).to_vec(), part).unwrap()));
                }
                out
            }
            Op::Sum(x) => {
                let zeros = Tensor::zeros(self.shape(*x).to_vec());
                vec![(*x, zip(&zeros, g, &|_, gv| gv))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x).to_vec(), g.item()))],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x).to_vec()).unwrap())],
            Op::GatherRows { x, index } => {
                let rows = self.shape(*x)[0];
                let width = g.shape()[1];
                let mut dx = vec![T::zero(); rows * width];
                for (e, &r) in index.iter().enumerate() {
                    for f in 0..width {
                        dx[r * width + f] = dx[r * width + f] + g.data()[e * width + f];
                    }
                }
                vec![(*x, Tensor::new([rows, width], dx).unwrap())]
            }
            Op::ScatterAddRows { x, index } => {
                let width = g.shape()[1];
                let mut dx = Vec::with_capacity(index.len() * width);
                for &r in index.iter() {
                    dx.extend_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                vec![(*x, Tensor::new([index.len(), width], dx).unwrap())]
            }
            Op::SegmentSoftmax { x, segment } => {
                let width = y.shape()[1];
                let segments = segment.iter().max().map_or(0, |m| m + 1);
                let (yd, gd) = (y.data(), g.data());
                let mut dot = vec![T::zero(); segments * width];
                for i in 0..yd.len() {
                    let d = &mut dot[segment[i / width] * width + i % width];
                    *d = *d + gd[i] * yd[i];
                }
                let dx = (0..yd.len())
                    .map(|i| yd[i] * (gd[i] - dot[segment[i / width] * width + i % width]))
                    .collect();
                vec![(*x, Tensor::new(y.shape().to_vec(), dx).unwrap())]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = y.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let (gd, hd) = (g.data(), xhat.data());
                let gamma_v = self.value(*gamma).data();
                let count = T::from_usize(n * plane).unwrap();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gh = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for (&gv, &hv) in gd[r.clone()].iter().zip(&hd[r]) {
                            sum_g[ch] = sum_g[ch] + gv;
                            sum_gh[ch] = sum_gh[ch] + gv * hv;
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        let k = gamma_v[ch] * inv_std[ch];
                        let (mg, mgh) = (sum_g[ch] / count, sum_gh[ch] / count);
                        for ((d, &gv), &hv) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&hd[r]) {
                            *d = k * (gv - mg - hv * mgh);
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(s.to_vec(), dx).unwrap()),
                    (*gamma, Tensor::new([1, c, 1, 1], sum_gh).unwrap()),
                    (*beta, Tensor::new([1, c, 1, 1], sum_g).unwrap()),
                ]
            }
            Op::SpMM { x, matrix } => {
                let width = g.shape()[1];
                let dx = matrix.apply(g.data(), width, true);
                vec![(*x, Tensor::new([matrix.cols, width], dx).unwrap())]
            }
        }
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and the references it needs for the backward pass, so
//! node indices are already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates into leaf gradients.
//!
//! Gradients accumulate across repeated `backward` calls until
//! [`Graph::zero_grad`] is called.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, usage, Result};
use crate::math;
use crate::tensor::{split_axis, Tensor};
use crate::EPS;
#[cfg(test)]
use crate::Error;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Upsample { input: Var, factor: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Softmax { input: Var, axis: usize },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Expand(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SelectRows { input: Var, index: Vec<usize> },
    SqDist(Var),
    FrobNorm(Var),
    L2NormalizeRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{}: shape {:?} vs {:?}", what, a.shape(), b.shape()));
    }
    Ok(())
}

#[inline]
fn clip_denominator(d: f64) -> f64 {
    if d.abs() >= EPS {
        d
    } else if d < 0.0 {
        -EPS
    } else {
        EPS
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Broadcast index map from `from` (dims equal or 1) to `to`.
fn expand_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let rank = to.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if from[d] == 1 { 0 } else { acc };
        acc *= from[d];
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.check_finite("operation output")?;
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf input")?;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division with the denominator clipped away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / clip_denominator(y), Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(dim_err!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let out = matmul_raw(va, vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", va.shape()));
        }
        let out = transpose_raw(va);
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Discrete cross-correlation with zero padding.
    /// `input [N, Cin, H, W]`, `kernel [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        if x.rank() != 4 || w.rank() != 4 {
            return Err(dim_err!("conv2d needs rank-4 input and kernel, got {:?} / {:?}", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(usage!("conv2d stride must be >= 1"));
        }
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if kcin != cin {
            return Err(dim_err!("conv2d channel mismatch: input {} vs kernel {}", cin, kcin));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(dim_err!("conv2d kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad));
        }
        let geo = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: conv_out(h, kh, stride, pad),
            ow: conv_out(wd, kw, stride, pad),
        };
        let mut out = vec![0.0; n * cout * geo.oh * geo.ow];
        geo.forward(x.data(), w.data(), &mut out);
        let out = Tensor::new(&[n, cout, geo.oh, geo.ow], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        self.push(out, Op::Conv2d { input, kernel, stride, pad }, rg)
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 || factor == 0 {
            return Err(dim_err!("upsample needs rank-4 input and factor >= 1"));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(input);
        self.push(out, Op::Upsample { input, factor }, rg)
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn maxpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 || size == 0 {
            return Err(dim_err!("maxpool needs rank-4 input and size >= 1"));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / size, w / size);
        if oh == 0 || ow == 0 {
            return Err(dim_err!("maxpool window {} exceeds input {}x{}", size, h, w));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = base + (oy * size + ky) * w + ox * size + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(input);
        self.push(out, Op::MaxPool { input, argmax }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, math::exp, Op::Exp(a))
    }

    /// Natural log of `max(x, EPS)`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| math::ln(x.max(EPS)), Op::Log(a))
    }

    /// `x^p` for nonnegative `x`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(usage!("pow with exponent {} applied to a negative input", p));
        }
        self.unary(a, |x| math::powf(x, p), Op::Pow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(dim_err!("softmax axis {} out of range for {:?}", axis, x.shape()));
        }
        let out = softmax_raw(x, axis);
        let rg = self.rg(a);
        self.push(out, Op::Softmax { input: a, axis }, rg)
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(dim_err!("sum axis {} out of range for {:?}", axis, x.shape()));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        self.push(out, Op::SumAxis { input: a, axis }, rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| dim_err!("mean axis {} out of range", axis))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Broadcast size-1 dimensions up to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != shape.len()
            || x.shape().iter().zip(shape).any(|(&f, &t)| f != t && f != 1)
        {
            return Err(dim_err!("cannot expand {:?} to {:?}", x.shape(), shape));
        }
        let map = expand_index_map(x.shape(), shape);
        let xd = x.data();
        let out = Tensor::new(shape, map.iter().map(|&i| xd[i]).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::Expand(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| usage!("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d])
            {
                return Err(dim_err!("concat shape mismatch {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Gather entries along axis 0: `out[i] = x[index[i]]`.
    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 || index.is_empty() || index.iter().any(|&i| i >= x.shape()[0]) {
            return Err(dim_err!("row selection {:?} invalid for {:?}", index, x.shape()));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        self.push(out, Op::SelectRows { input: a, index: index.to_vec() }, rg)
    }

    /// Pairwise squared Euclidean distances between the rows of `[N, d]`.
    pub fn sq_dist(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(dim_err!("sq_dist needs a matrix, got {:?}", x.shape()));
        }
        let out = sq_dist_raw(x);
        let rg = self.rg(a);
        self.push(out, Op::SqDist(a), rg)
    }

    /// Frobenius norm of the whole tensor.
    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(math::sqrt(s)), Op::FrobNorm(a), rg)
    }

    /// Divide each row of `[N, d]` by its own l2 norm (clipped at `EPS`).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(dim_err!("l2_normalize_rows needs a matrix, got {:?}", x.shape()));
        }
        let d = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(EPS);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        self.push(out, Op::L2NormalizeRows(a), rg)
    }

    /// Column standardisation of `[N, d]`: zero mean, unit population
    /// variance, `sqrt(var + eps)` in the denominator.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("standardize_cols needs a matrix, got {:?}", shape));
        }
        let mean = self.mean_axis(a, 0)?;
        let mean = self.expand(mean, &shape)?;
        let centered = self.sub(a, mean)?;
        let sq = self.square(centered)?;
        let var = self.mean_axis(sq, 0)?;
        let var = self.add_scalar(var, eps)?;
        let std = self.pow(var, 0.5)?;
        let std = self.expand(std, &shape)?;
        self.div(centered, std)
    }

    /// Reverse pass from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(usage!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, gin) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                gin.check_finite("gradient")?;
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gin),
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::new(a.shape(), a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect())
        };
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = zip_map(vb, &|bv, gv| bv * gv)?;
                let gb = zip_map(va, &|av, gv| av * gv)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = zip_map(vb, &|bv, gv| gv / clip_denominator(bv))?;
                let gb: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .zip(g.data())
                    .map(|((&av, &bv), &gv)| if bv.abs() >= EPS { -gv * av / (bv * bv) } else { 0.0 })
                    .collect();
                vec![(*a, ga), (*b, Tensor::new(vb.shape(), gb)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = matmul_raw(g, &transpose_raw(vb));
                let gb = matmul_raw(&transpose_raw(va), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, transpose_raw(g))],
            Op::Conv2d { input, kernel, stride, pad } => {
                let (x, w) = (val(*input), val(*kernel));
                let geo = ConvGeom {
                    n: x.shape()[0],
                    cin: x.shape()[1],
                    h: x.shape()[2],
                    w: x.shape()[3],
                    cout: w.shape()[0],
                    kh: w.shape()[2],
                    kw: w.shape()[3],
                    stride: *stride,
                    pad: *pad,
                    oh: y.shape()[2],
                    ow: y.shape()[3],
                };
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                geo.backward(
                    x.data(),
                    w.data(),
                    g.data(),
                    self.rg(*input).then_some(&mut gx[..]),
                    self.rg(*kernel).then_some(&mut gw[..]),
                );
                vec![
                    (*input, Tensor::new(x.shape(), gx)?),
                    (*kernel, Tensor::new(w.shape(), gw)?),
                ]
            }
            Op::Upsample { input, factor } => {
                let x = val(*input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![0.0; x.len()];
                for plane in 0..x.shape()[0] * x.shape()[1] {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            gx[plane * h * w + (yy / factor) * w + xx / factor] +=
                                g.data()[plane * oh * ow + yy * ow + xx];
                        }
                    }
                }
                vec![(*input, Tensor::new(x.shape(), gx)?)]
            }
            Op::MaxPool { input, argmax } => {
                let x = val(*input);
                let mut gx = vec![0.0; x.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                vec![(*input, Tensor::new(x.shape(), gx)?)]
            }
            Op::Relu(a) => vec![(*a, zip_map(val(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 })?)],
            Op::Abs(a) => vec![(
                *a,
                zip_map(val(*a), &|x, gv| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?,
            )],
            Op::Exp(a) => vec![(*a, zip_map(y, &|yv, gv| yv * gv)?)],
            Op::Log(a) => vec![(*a, zip_map(val(*a), &|x, gv| if x > EPS { gv / x } else { 0.0 })?)],
            Op::Pow(a, p) => {
                let p = *p;
                vec![(
                    *a,
                    zip_map(val(*a), &|x, gv| {
                        if x > 0.0 {
                            gv * p * math::powf(x, p - 1.0)
                        } else if p == 1.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?,
                )]
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(*a, zip_map(val(*a), &|x, gv| if x > lo && x < hi { gv } else { 0.0 })?)]
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + r;
                        let dot: f64 = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                vec![(*input, Tensor::new(y.shape(), gx)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::SumAxis { input, axis } => {
                let x = val(*input);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..len {
                        gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*input, Tensor::new(x.shape(), gx)?)]
            }
            Op::Expand(a) => {
                let x = val(*a);
                let map = expand_index_map(x.shape(), y.shape());
                let mut gx = vec![0.0; x.len()];
                for (&src, &gv) in map.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                vec![(*a, Tensor::new(x.shape(), gx)?)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Concat { inputs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis];
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let t = val(*v);
                    let len = t.shape()[*axis];
                    let mut gx = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    offset += len;
                    res.push((*v, Tensor::new(t.shape(), gx)?));
                }
                res
            }
            Op::SelectRows { input, index } => {
                let x = val(*input);
                let inner: usize = x.shape()[1..].iter().product();
                let mut gx = vec![0.0; x.len()];
                for (row, &src) in index.iter().enumerate() {
                    for k in 0..inner {
                        gx[src * inner + k] += g.data()[row * inner + k];
                    }
                }
                vec![(*input, Tensor::new(x.shape(), gx)?)]
            }
            Op::SqDist(a) => {
                let x = val(*a);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let (xd, gd) = (x.data(), g.data());
                let mut gx = vec![0.0; x.len()];
                for i in 0..n {
                    for j in 0..n {
                        let c = 2.0 * (gd[i * n + j] + gd[j * n + i]);
                        if c == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            gx[i * d + k] += c * (xd[i * d + k] - xd[j * d + k]);
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape(), gx)?)]
            }
            Op::FrobNorm(a) => {
                let x = val(*a);
                let norm = y.item();
                let gv = g.item();
                let gx = if norm > 0.0 { x.map(|v| gv * v / norm) } else { Tensor::zeros(x.shape()) };
                vec![(*a, gx)]
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let d = x.shape()[1];
                let mut gx = vec![0.0; x.len()];
                for r in 0..x.shape()[0] {
                    let xr = &x.data()[r * d..(r + 1) * d];
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let norm = math::sqrt(xr.iter().map(|v| v * v).sum::<f64>());
                    let out = &mut gx[r * d..(r + 1) * d];
                    if norm > EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            out[k] = (gr[k] - yr[k] * dot) / norm;
                        }
                    } else {
                        for k in 0..d {
                            out[k] = gr[k] / EPS;
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape(), gx)?)]
            }
        })
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).expect("transpose shape")
}

pub(crate) fn softmax_raw(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + r;
            let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = math::exp(xd[idx(k)] - max);
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("softmax shape")
}

pub(crate) fn sq_dist_raw(x: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..d).map(|k| { let t = xd[i * d + k] - xd[j * d + k]; t * t }).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::new(&[n, n], out).expect("sq_dist shape")
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        // ox*stride + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = oy * self.stride + ky;
        (y >= self.pad && y - self.pad < self.h).then(|| y - self.pad)
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for n in 0..self.n {
            for co in 0..self.cout {
                let o_plane = &mut out[(n * self.cout + co) * ohw..(n * self.cout + co + 1) * ohw];
                for ci in 0..self.cin {
                    let x_plane = &x[(n * self.cin + ci) * hw..(n * self.cin + ci + 1) * hw];
                    let w_base = ((co * self.cin + ci) * self.kh) * self.kw;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = w[w_base + ky * self.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = self.ox_range(kx);
                            for oy in 0..self.oh {
                                let Some(iy) = self.iy(oy, ky) else { continue };
                                let o_row = &mut o_plane[oy * self.ow..(oy + 1) * self.ow];
                                let x_row = &x_plane[iy * self.w..(iy + 1) * self.w];
                                for ox in lo..hi {
                                    o_row[ox] += wv * x_row[ox * self.stride + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64], mut gx: Option<&mut [f64]>, mut gw: Option<&mut [f64]>) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for n in 0..self.n {
            for co in 0..self.cout {
                let g_plane = &g[(n * self.cout + co) * ohw..(n * self.cout + co + 1) * ohw];
                for ci in 0..self.cin {
                    let x_off = (n * self.cin + ci) * hw;
                    let w_base = ((co * self.cin + ci) * self.kh) * self.kw;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wi = w_base + ky * self.kw + kx;
                            let wv = w[wi];
                            let (lo, hi) = self.ox_range(kx);
                            let mut acc = 0.0;
                            for oy in 0..self.oh {
                                let Some(iy) = self.iy(oy, ky) else { continue };
                                let g_row = &g_plane[oy * self.ow..(oy + 1) * self.ow];
                                let row_off = x_off + iy * self.w + kx;
                                let at = |ox: usize| row_off + ox * self.stride - self.pad;
                                if gw.is_some() {
                                    for ox in lo..hi {
                                        acc += g_row[ox] * x[at(ox)];
                                    }
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    if wv != 0.0 {
                                        for ox in lo..hi {
                                            gx[at(ox)] += wv * g_row[ox];
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[wi] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Round-off multiple used for the finite-difference noise floor.
pub const FD_NOISE_ULPS: f64 = 64.0;

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Per input: max of `|a - n| / max(1e-12, |a| + |n|)` over elements
    /// whose difference exceeds `noise_floor`.
    pub max_rel_err: Vec<f64>,
    /// Per input: max absolute difference.
    pub max_abs_err: Vec<f64>,
    pub step: f64,
    /// `FD_NOISE_ULPS * eps * max(|f|, 1) / h`: differences below this are
    /// beyond what the central difference resolves and count as agreement.
    pub noise_floor: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error used throughout gradient checking.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(usage!("grad_check function must return a scalar"));
    }
    Ok(g.value(out).item())
}

/// Compare the tape's gradients of `f` with central finite differences of step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(usage!("grad_check function must return a scalar"));
    }
    g.backward(out)?;
    let noise_floor = FD_NOISE_ULPS * f64::EPSILON * g.value(out).item().abs().max(1.0) / h;
    let mut report = GradCheckReport { max_rel_err: Vec::new(), max_abs_err: Vec::new(), step: h, noise_floor };
    let mut work = inputs.to_vec();
    for (idx, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for k in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[k];
            work[idx].data_mut()[k] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[idx].data_mut()[k] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[idx].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            if (a - numeric).abs() > noise_floor {
                rel = rel.max(relative_error(a, numeric));
            }
            abs = abs.max((a - numeric).abs());
        }
        report.max_rel_err.push(rel);
        report.max_abs_err.push(abs);
    }
    Ok(report)
}

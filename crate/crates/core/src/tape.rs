//! Reverse-mode automatic differentiation over a computation record.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! whose inputs require gradients are recorded together with whatever the
//! backward rule needs; everything else is stored as a detached constant.
//! [`Tape::backward`] walks the record once, in reverse, and consumes it.
//!
//! ```
//! use lowshot::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let x = tape.constant(Tensor::from_vec(vec![0.5, 0.25, 2.0]));
//! let y = tape.dot(w, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[0.5, 0.25, 2.0]);
//! ```

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::tensor::{lit, Element, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-normalization node obtains its statistics.
#[derive(Clone, Debug)]
pub enum BnStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: T },
    /// Normalize with externally supplied (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    DivScalar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    AvgPool { x: Var, k: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_coupled: bool },
    Reshape(Var),
    Concat(Vec<Var>),
    Dot(Var, Var),
    L2NormRows(Var),
    DivRows(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather { x: Var, idx: Vec<usize> },
    Clamp { x: Var, lo: T, hi: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a gradient-requiring leaf (zeros when unreachable).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A computation record for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Sum with eight interleaved partial accumulators.
fn lane_sum<T: Element>(it: impl Iterator<Item = T>) -> T {
    let mut acc = [T::zero(); 8];
    for (i, v) in it.enumerate() {
        acc[i & 7] += v;
    }
    acc.iter().copied().sum()
}

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(TensorError::ShapeMismatch { op, shapes: vec![shape.to_vec()] }),
    }
}

fn row_output_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        Vec::new()
    } else {
        vec![shape[0]]
    }
}

/// Reduces a broadcast gradient back to the shape of the operand.
fn unbroadcast<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g.clone()
    } else {
        Tensor::from_parts(shape.to_vec(), vec![g.sum()])
    }
}

fn elementwise<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    } else if b.rank() == 0 {
        let s = b.item();
        Ok(Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x, s)).collect()))
    } else if a.rank() == 0 {
        let s = a.item();
        Ok(Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|&y| f(s, y)).collect()))
    } else {
        Err(TensorError::ShapeMismatch { op, shapes: vec![a.shape().to_vec(), b.shape().to_vec()] })
    }
}

/// `a[m x k] * b[k x n]` into a fresh buffer.
fn matmul_raw<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    kernels::gemm_acc(m, k, n, a, b, &mut c);
    c
}

fn transpose<T: Element>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn softmax_into<T: Element>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> Result<&Node<T>, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn val(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        Ok(&self.node(v)?.value)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::RecordConsumed);
        }
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = elementwise("add", self.val(a)?, self.val(b)?, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = elementwise("sub", self.val(a)?, self.val(b)?, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = elementwise("mul", self.val(a)?, self.val(b)?, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let out = self.val(x)?.map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// Division of every element by a scalar-valued node.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.val(s)?;
        if !sv.is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "scalar-div",
                shapes: vec![self.val(x)?.shape().to_vec(), sv.shape().to_vec()],
            });
        }
        let d = sv.item();
        let out = self.val(x)?.map(|v| v / d);
        self.push("scalar-div", out, Op::DivScalar(x, s), &[x, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                shapes: vec![av.shape().to_vec(), bv.shape().to_vec()],
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], matmul_raw(m, k, n, av.data(), bv.data()));
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        if xv.rank() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", shapes: vec![xv.shape().to_vec()] });
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let out = Tensor::from_parts(vec![c, r], transpose(r, c, xv.data()));
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.val(x)?.map(|v| v.exp());
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.val(x)?.map(|v| v.ln());
        self.push("log", out, Op::Log(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.val(x)?.map(|v| -v);
        self.push("negate", out, Op::Neg(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.val(x)?.sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let out = Tensor::scalar(xv.sum() / lit::<T>(xv.numel() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Row-wise maximum of a rank-1 or rank-2 tensor; ties select the lowest
    /// index.
    pub fn max_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let (rows, cols) = rows_cols("max-select", xv.shape())?;
        let mut argmax = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let i = crate::tensor::argmax(row);
            argmax.push(i);
            data.push(row[i]);
        }
        let out = Tensor::from_parts(row_output_shape(xv.shape()), data);
        self.push("max-select", out, Op::MaxRows { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.val(x)?.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Cross-correlation of an `NCHW` input with `(out_c, in_c, kh, kw)`
    /// weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (xv, wv) = (self.val(x)?, self.val(w)?);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            shapes: vec![xv.shape().to_vec(), wv.shape().to_vec()],
        };
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(mismatch());
        }
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let geom = ConvGeom::new(c, wv.shape()[0], (wv.shape()[2], wv.shape()[3]), stride, pad, (h, wd))?;
        let bias = match b {
            Some(b) => {
                let bv = self.val(b)?;
                if bv.shape() != [geom.out_c] {
                    return Err(mismatch());
                }
                Some(bv.data())
            }
            None => None,
        };
        let data = kernels::conv2d_forward(n, &geom, xv.data(), wv.data(), bias)?;
        let out = Tensor::from_parts(vec![n, geom.out_c, geom.out_h(), geom.out_w()], data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom, batch: n }, &inputs)
    }

    /// Non-overlapping `k x k` average pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        if xv.rank() != 4 || k == 0 || xv.shape()[2] < k || xv.shape()[3] < k {
            return Err(TensorError::ShapeMismatch { op: "pool-avg", shapes: vec![xv.shape().to_vec(), vec![k, k]] });
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / lit::<T>((k * k) as f64);
        let mut data = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    data[(plane * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], data);
        self.push("pool-avg", out, Op::AvgPool { x, k }, &[x])
    }

    /// Batch normalization over axis 1 of a rank-2 or rank-4 tensor.
    ///
    /// With [`BnStats::Batch`] the per-channel statistics of this batch are
    /// returned so the caller can fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let xv = self.val(x)?;
        let (gv, bv) = (self.val(gamma)?, self.val(beta)?);
        if xv.rank() < 2 {
            return Err(TensorError::ShapeMismatch { op: "batchnorm", shapes: vec![xv.shape().to_vec()] });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                shapes: vec![xv.shape().to_vec(), gv.shape().to_vec(), bv.shape().to_vec()],
            });
        }
        let count = n * inner;
        let xd = xv.data();
        let block = |s: usize, ch: usize| (s * c + ch) * inner..(s * c + ch + 1) * inner;

        let (mean, var, eps, batch_coupled) = match stats {
            BnStats::Batch { eps } => {
                let inv_count = T::one() / lit::<T>(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mu = (0..n).map(|s| lane_sum(xd[block(s, ch)].iter().copied())).sum::<T>() * inv_count;
                    let v = (0..n)
                        .map(|s| lane_sum(xd[block(s, ch)].iter().map(|&x| (x - mu) * (x - mu))))
                        .sum::<T>()
                        * inv_count;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                (mean, var, eps, true)
            }
            BnStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batchnorm",
                        shapes: vec![xv.shape().to_vec(), vec![mean.len()], vec![var.len()]],
                    });
                }
                if var.iter().any(|&v| v < T::zero()) {
                    return Err(TensorError::InvalidArgument { op: "batchnorm", msg: "negative running variance".into() });
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut data = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
                for (o, &x) in data[block(s, ch)].iter_mut().zip(&xd[block(s, ch)]) {
                    *o = g * ((x - mu) * is) + b;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let batch_stats = batch_coupled.then(|| BatchStats { mean: mean.clone(), var, count });
        let v = self.push(
            "batchnorm",
            out,
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_coupled },
            &[x, gamma, beta],
        )?;
        Ok((v, batch_stats))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.val(x)?.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.val(*parts.first().ok_or(TensorError::InvalidShape("concat of nothing".into()))?)?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.val(p)?;
            if pv.rank() == 0 || pv.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    shapes: vec![first.shape().to_vec(), pv.shape().to_vec()],
                });
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch { op: "dot", shapes: vec![av.shape().to_vec(), bv.shape().to_vec()] });
        }
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    /// Euclidean norm of each row.
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let (rows, cols) = rows_cols("l2norm", xv.shape())?;
        let data = (0..rows)
            .map(|r| xv.data()[r * cols..(r + 1) * cols].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let out = Tensor::from_parts(row_output_shape(xv.shape()), data);
        self.push("l2norm", out, Op::L2NormRows(x), &[x])
    }

    /// Divides row `i` of `x` by element `i` of `d` (explicit row broadcast).
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var, TensorError> {
        let (xv, dv) = (self.val(x)?, self.val(d)?);
        let (rows, cols) = rows_cols("div-rows", xv.shape())?;
        if dv.numel() != rows || dv.shape() != row_output_shape(xv.shape()) {
            return Err(TensorError::ShapeMismatch { op: "div-rows", shapes: vec![xv.shape().to_vec(), dv.shape().to_vec()] });
        }
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            let dr = dv.data()[r];
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v = *v / dr;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("div-rows", out, Op::DivRows(x, d), &[x, d])
    }

    /// Affine map `x W^T + b` with `x: [n, d]`, `W: [m, d]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.val(x)?, self.val(w)?, self.val(b)?);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] || bv.shape() != [wv.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                shapes: vec![xv.shape().to_vec(), wv.shape().to_vec(), bv.shape().to_vec()],
            });
        }
        let (n, d, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            let xr = &xv.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let wr = &wv.data()[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for (&a, &bw) in xr.iter().zip(wr) {
                    acc += a * bw;
                }
                data[i * m + j] = acc + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![n, m], data);
        self.push("linear", out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Softmax of each row, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let (rows, cols) = rows_cols("softmax", xv.shape())?;
        let mut data = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            softmax_into(&xv.data()[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("softmax", out, Op::SoftmaxRows(x), &[x])
    }

    /// Log-softmax of each row.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        let (rows, cols) = rows_cols("log-softmax", xv.shape())?;
        let mut data = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("log-softmax", out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Picks flat elements of `x` into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var, TensorError> {
        let xv = self.val(x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.numel()) {
            return Err(TensorError::InvalidArgument { op: "gather", msg: format!("index {bad} out of range for {:?}", xv.shape()) });
        }
        if shape.iter().product::<usize>() != idx.len() {
            return Err(TensorError::ShapeMismatch { op: "gather", shapes: vec![vec![idx.len()], shape.to_vec()] });
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.push("gather", out, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient passes through inside the range.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        let out = self.val(x)?.map(|v| v.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Runs the backward pass from a scalar `root`, consuming the record.
    ///
    /// Every gradient-requiring leaf receives an entry; leaves the root does
    /// not depend on get zeros.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::RecordConsumed);
        }
        let rv = self.val(root)?;
        if rv.numel() != 1 {
            return Err(TensorError::RootNotScalar(rv.shape().to_vec()));
        }
        let root_shape = rv.shape().to_vec();
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(&root_shape, T::one()));
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contrib) in self.backward_node(node, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let v = |x: Var| &self.nodes[x.0].value;
        let like = |x: Var, data: Vec<T>| Tensor::from_parts(v(x).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, unbroadcast(g, v(*a).shape())), (*b, unbroadcast(g, v(*b).shape()))],
            Op::Sub(a, b) => {
                let neg = g.map(|x| -x);
                vec![(*a, unbroadcast(g, v(*a).shape())), (*b, unbroadcast(&neg, v(*b).shape()))]
            }
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if self.rg(*a) {
                    let ga = elementwise("mul", g, v(*b), |x, y| x * y).expect("recorded shapes");
                    out.push((*a, unbroadcast(&ga, v(*a).shape())));
                }
                if self.rg(*b) {
                    let gb = elementwise("mul", g, v(*a), |x, y| x * y).expect("recorded shapes");
                    out.push((*b, unbroadcast(&gb, v(*b).shape())));
                }
                out
            }
            Op::Scale(x, c) => vec![(*x, g.map(|t| t * *c))],
            Op::DivScalar(x, s) => {
                let d = v(*s).item();
                let gx = g.map(|t| t / d);
                let gs: T = g.data().iter().zip(v(*x).data()).map(|(&gi, &xi)| gi * xi).sum::<T>() / (d * d);
                vec![(*x, gx), (*s, Tensor::from_parts(v(*s).shape().to_vec(), vec![-gs]))]
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut out = Vec::new();
                if self.rg(*a) {
                    let bt = transpose(k, n, bv.data());
                    out.push((*a, like(*a, matmul_raw(m, n, k, g.data(), &bt))));
                }
                if self.rg(*b) {
                    let at = transpose(m, k, av.data());
                    out.push((*b, like(*b, matmul_raw(k, m, n, &at, g.data()))));
                }
                out
            }
            Op::Transpose(x) => {
                let (r, c) = (v(*x).shape()[0], v(*x).shape()[1]);
                vec![(*x, like(*x, transpose(c, r, g.data())))]
            }
            Op::Exp(x) => {
                let data = g.data().iter().zip(node.value.data()).map(|(&gi, &y)| gi * y).collect();
                vec![(*x, like(*x, data))]
            }
            Op::Log(x) => {
                let data = g.data().iter().zip(v(*x).data()).map(|(&gi, &xi)| gi / xi).collect();
                vec![(*x, like(*x, data))]
            }
            Op::Neg(x) => vec![(*x, g.map(|t| -t))],
            Op::Sum(x) => vec![(*x, Tensor::full(v(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = lit::<T>(v(*x).numel() as f64);
                vec![(*x, Tensor::full(v(*x).shape(), g.item() / n))]
            }
            Op::MaxRows { x, argmax } => {
                let xv = v(*x);
                let cols = xv.numel() / argmax.len();
                let mut data = vec![T::zero(); xv.numel()];
                for (r, &i) in argmax.iter().enumerate() {
                    data[r * cols + i] = g.data()[r];
                }
                vec![(*x, like(*x, data))]
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(v(*x).data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, data))]
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let need = (self.rg(*x), self.rg(*w), b.map_or(false, |b| self.rg(b)));
                let grads = kernels::conv2d_backward(*batch, geom, v(*x).data(), v(*w).data(), g.data(), need);
                let mut out = Vec::new();
                if let Some(gx) = grads.input {
                    out.push((*x, like(*x, gx)));
                }
                if let Some(gw) = grads.weight {
                    out.push((*w, like(*w, gw)));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, like(*b, gb)));
                }
                out
            }
            Op::AvgPool { x, k } => {
                let xv = v(*x);
                let (nc, h, w) = (xv.shape()[0] * xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / lit::<T>((k * k) as f64);
                let mut data = vec![T::zero(); xv.numel()];
                for plane in 0..nc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(plane * oh + oy) * ow + ox] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    data[plane * h * w + (oy * k + dy) * w + ox * k + dx] = gv;
                                }
                            }
                        }
                    }
                }
                vec![(*x, like(*x, data))]
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_coupled } => {
                let xv = v(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let inner: usize = xv.shape()[2..].iter().product();
                let m = lit::<T>((n * inner) as f64);
                let (gd, xd) = (g.data(), xv.data());
                let gam = v(*gamma).data();
                let block = |s: usize, ch: usize| (s * c + ch) * inner..(s * c + ch + 1) * inner;
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xv.numel()];
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let sg = (0..n).map(|s| lane_sum(gd[block(s, ch)].iter().copied())).sum::<T>();
                    let sgx = (0..n)
                        .map(|s| lane_sum(gd[block(s, ch)].iter().zip(&xd[block(s, ch)]).map(|(&g, &x)| g * ((x - mu) * is))))
                        .sum::<T>();
                    ggamma[ch] = sgx;
                    gbeta[ch] = sg;
                    let scale = gam[ch] * is;
                    for s in 0..n {
                        let out = &mut gx[block(s, ch)];
                        if *batch_coupled {
                            let (mg, mgx) = (sg / m, sgx / m);
                            for ((o, &g), &x) in out.iter_mut().zip(&gd[block(s, ch)]).zip(&xd[block(s, ch)]) {
                                *o = scale * (g - mg - ((x - mu) * is) * mgx);
                            }
                        } else {
                            for (o, &g) in out.iter_mut().zip(&gd[block(s, ch)]) {
                                *o = scale * g;
                            }
                        }
                    }
                }
                vec![(*x, like(*x, gx)), (*gamma, like(*gamma, ggamma)), (*beta, like(*beta, gbeta))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data().to_vec()))],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = v(p).numel();
                        let piece = like(p, g.data()[offset..offset + len].to_vec());
                        offset += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Dot(a, b) => {
                let s = g.item();
                vec![(*a, v(*b).map(|t| t * s)), (*b, v(*a).map(|t| t * s))]
            }
            Op::L2NormRows(x) => {
                let xv = v(*x);
                let cols = *xv.shape().last().expect("rank >= 1");
                let mut data = vec![T::zero(); xv.numel()];
                for (r, &nr) in node.value.data().iter().enumerate() {
                    if nr > T::zero() {
                        let gr = g.data()[r] / nr;
                        for j in 0..cols {
                            data[r * cols + j] = gr * xv.data()[r * cols + j];
                        }
                    }
                }
                vec![(*x, like(*x, data))]
            }
            Op::DivRows(x, d) => {
                let (xv, dv) = (v(*x), v(*d));
                let cols = *xv.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); xv.numel()];
                let mut gd = vec![T::zero(); dv.numel()];
                for r in 0..dv.numel() {
                    let dr = dv.data()[r];
                    let mut acc = T::zero();
                    for j in 0..cols {
                        let gi = g.data()[r * cols + j];
                        gx[r * cols + j] = gi / dr;
                        acc += gi * xv.data()[r * cols + j];
                    }
                    gd[r] = -acc / (dr * dr);
                }
                vec![(*x, like(*x, gx)), (*d, like(*d, gd))]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let (n, d, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let mut out = Vec::new();
                if self.rg(*x) {
                    out.push((*x, like(*x, matmul_raw(n, m, d, g.data(), wv.data()))));
                }
                if self.rg(*w) {
                    let gt = transpose(n, m, g.data());
                    out.push((*w, like(*w, matmul_raw(m, n, d, &gt, xv.data()))));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g.data()[i * m + j];
                        }
                    }
                    out.push((*b, like(*b, gb)));
                }
                out
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("rank >= 1");
                let mut data = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let range = r * cols..(r + 1) * cols;
                    let dotp: T = g.data()[range.clone()].iter().zip(&y[range.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in range {
                        data[i] = y[i] * (g.data()[i] - dotp);
                    }
                }
                vec![(*x, like(*x, data))]
            }
            Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("rank >= 1");
                let mut data = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let range = r * cols..(r + 1) * cols;
                    let gs: T = g.data()[range.clone()].iter().copied().sum();
                    for i in range {
                        data[i] = g.data()[i] - y[i].exp() * gs;
                    }
                }
                vec![(*x, like(*x, data))]
            }
            Op::Gather { x, idx } => {
                let mut data = vec![T::zero(); v(*x).numel()];
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    data[i] += gi;
                }
                vec![(*x, like(*x, data))]
            }
            Op::Clamp { x, lo, hi } => {
                let data = g
                    .data()
                    .iter()
                    .zip(v(*x).data())
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, data))]
            }
        }
    }
}

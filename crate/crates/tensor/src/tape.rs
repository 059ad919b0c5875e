//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to replay the chain rule. Nodes only ever reference earlier nodes,
//! so a single reverse sweep visits them in valid topological order.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Softplus,
    Square,
}

/// How an up-sampling stage doubles spatial resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Upsample {
    /// Stride-2 transposed convolution (kernel 3, padding 1, output padding 1).
    #[default]
    TransposedConv,
    /// Nearest-neighbour doubling followed by a stride-1 convolution.
    NearestConv,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    AddRowVector(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Unfold { x: Var, window: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    PadReflect { x: Var, pad: usize },
    UpsampleNearest(Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    L2NormalizeRows { x: Var, eps: T },
    Concat { parts: Vec<Var> },
    GatherRows { x: Var, idx: Vec<usize> },
    PickCols { x: Var, idx: Vec<usize> },
    BatchedRowMatVec { a: Var, v: Var },
    AvgPoolHwc { x: Var, factor: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-owner recording of tensor operations.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` for leaves the loss does not depend on
    /// through a differentiable path (constants, detached values).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: same value, no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(value, op, &[a, b]))
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

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let value = match kind {
            Unary::Exp => self.value(x).map(T::exp),
            Unary::Log => self.value(x).map(T::ln),
            Unary::Relu => self.value(x).map(|v| v.max(T::zero())),
            Unary::LeakyRelu(slope) => {
                let s = T::lit(slope);
                self.value(x).map(|v| if v > T::zero() { v } else { v * s })
            }
            Unary::Tanh => self.value(x).map(T::tanh),
            // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
            Unary::Softplus => self
                .value(x)
                .map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p()),
            Unary::Square => self.value(x).map(|v| v * v),
        };
        self.push(value, Op::Unary(x, kind), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Sum of a matrix along `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("sum_axis")?;
        let value = match axis {
            0 => Tensor::from_fn(vec![c], |j| (0..r).map(|i| t.data()[i * c + j]).sum()),
            1 => Tensor::from_fn(vec![r], |i| t.row(i).iter().copied().sum()),
            _ => return Err(TensorError::config("sum_axis", format!("axis {axis} out of range"))),
        };
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("mean_axis")?;
        let n = if axis == 0 { r } else { c };
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::lit(n as f64)))
    }

    /// Maximum of a matrix along `axis`; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("max_axis")?;
        let (outer, inner, stride_o, stride_i) = match axis {
            0 => (c, r, 1, c),
            1 => (r, c, c, 1),
            _ => return Err(TensorError::config("max_axis", format!("axis {axis} out of range"))),
        };
        let mut argmax = Vec::with_capacity(outer);
        let mut vals = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = o * stride_o;
            for i in 1..inner {
                let k = o * stride_o + i * stride_i;
                if t.data()[k] > t.data()[best] {
                    best = k;
                }
            }
            argmax.push(best);
            vals.push(t.data()[best]);
        }
        let value = Tensor::from_parts(vec![outer], vals);
        Ok(self.push(value, Op::MaxAxis { x, argmax }, &[x]))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2d()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Stacks tensors along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::config("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(TensorError::shape("concat", self.shape(*first), t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Selects leading-axis slices by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::config("gather_rows", "scalar input"));
        }
        let rows = t.shape()[0];
        let stride = t.numel() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::config("gather_rows", format!("index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[i] = x[i, idx[i]]` for a matrix `x`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("pick_cols")?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(TensorError::config("pick_cols", "index list does not match matrix"));
        }
        let value = Tensor::from_fn(vec![r], |i| t.data()[i * c + idx[i]]);
        Ok(self.push(value, Op::PickCols { x, idx: idx.to_vec() }, &[x]))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        let (_, n) = xt.dims2("add_row_vector")?;
        if bt.shape() != [n] {
            return Err(TensorError::shape("add_row_vector", xt.shape(), bt.shape()));
        }
        let bd = bt.data();
        let value = Tensor::from_fn(xt.shape().to_vec(), |k| xt.data()[k] + bd[k % n]);
        Ok(self.push(value, Op::AddRowVector(x, b), &[x, b]))
    }

    /// `out[i] = Σ_k a[i,k] · v[i,k,:]` for `a: N×K`, `v: N×K×C`.
    pub fn batched_row_matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (at, vt) = (self.value(a), self.value(v));
        let (n, k) = at.dims2("batched_row_matvec")?;
        let (n2, k2, c) = vt.dims3("batched_row_matvec")?;
        if n != n2 || k != k2 {
            return Err(TensorError::shape("batched_row_matvec", at.shape(), vt.shape()));
        }
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let w = at.data()[i * k + j];
                let src = &vt.data()[(i * k + j) * c..(i * k + j + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(value, Op::BatchedRowMatVec { a, v }, &[a, v]))
    }

    // ---- normalisation and attention helpers ----------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.dims2("softmax_rows")?;
        if !t.is_finite() {
            return Err(TensorError::Numeric { op: "softmax_rows" });
        }
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::softmax_rows(t.data(), c));
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.dims2("log_softmax_rows")?;
        if !t.is_finite() {
            return Err(TensorError::Numeric { op: "log_softmax_rows" });
        }
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::log_softmax_rows(t.data(), c));
        Ok(self.push(value, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Divides each row by its Euclidean norm plus `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.dims2("l2_normalize_rows")?;
        let eps = T::lit(eps);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in row.iter_mut() {
                *v = *v / (norm + eps);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::L2NormalizeRows { x, eps }, &[x]))
    }

    /// Per-channel normalisation of a `C×H×W` map (no affine terms).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3("instance_norm")?;
        let plane = h * w;
        let n = T::lit(plane as f64);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for ch in data.chunks_mut(plane) {
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            for v in ch.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Zero-padded `w×w` neighbourhoods of an `H×W×C` map: result `HW×w²×C`.
    pub fn unfold(&mut self, x: Var, window: usize) -> Result<Var> {
        check_window(window)?;
        let t = self.value(x);
        let (h, w, c) = t.dims3("unfold")?;
        let data = kernels::unfold_hwc(t.data(), h, w, c, window);
        let value = Tensor::from_parts(vec![h * w, window * window, c], data);
        Ok(self.push(value, Op::Unfold { x, window }, &[x]))
    }

    /// Mean over non-overlapping `factor×factor` blocks of an `H×W×C` map.
    pub fn avg_pool_hwc(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (h, w, c) = t.dims3("avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::config(
                "avg_pool",
                format!("{h}×{w} map is not divisible by pooling factor {factor}"),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = T::lit((factor * factor) as f64);
        let mut out = vec![T::zero(); oh * ow * c];
        for r in 0..h {
            for col in 0..w {
                let dst = ((r / factor) * ow + col / factor) * c;
                let src = (r * w + col) * c;
                for ch in 0..c {
                    out[dst + ch] = out[dst + ch] + t.data()[src + ch] / norm;
                }
            }
        }
        let value = Tensor::from_parts(vec![oh, ow, c], out);
        Ok(self.push(value, Op::AvgPoolHwc { x, factor }, &[x]))
    }

    // ---- convolution ----------------------------------------------------

    /// Zero-padded convolution of a `C×H×W` map with an `O×C×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (c, h, wd) = xt.dims3("conv2d")?;
        let [o, ci, k, k2] = wt.shape()[..] else {
            return Err(TensorError::shape("conv2d", xt.shape(), wt.shape()));
        };
        if ci != c || k != k2 {
            return Err(TensorError::shape("conv2d", xt.shape(), wt.shape()));
        }
        let (Some(oh), Some(ow)) = (kernels::conv_out(h, k, stride, pad), kernels::conv_out(wd, k, stride, pad)) else {
            return Err(TensorError::config(
                "conv2d",
                format!("{h}×{wd} input is smaller than the {k}×{k} kernel"),
            ));
        };
        let bias = self.check_bias("conv2d", b, o)?;
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let data = kernels::conv2d(xt.data(), wt.data(), bias, o, &geom);
        let value = Tensor::from_parts(vec![o, oh, ow], data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution of a `Cin×H×W` map with a `Cin×O×k×k` kernel.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (ci, h, wd) = xt.dims3("conv_transpose2d")?;
        let [wi, o, k, k2] = wt.shape()[..] else {
            return Err(TensorError::shape("conv_transpose2d", xt.shape(), wt.shape()));
        };
        if wi != ci || k != k2 {
            return Err(TensorError::shape("conv_transpose2d", xt.shape(), wt.shape()));
        }
        if output_pad >= stride.max(1) || h == 0 || wd == 0 {
            return Err(TensorError::config("conv_transpose2d", "output padding must be below stride"));
        }
        let out_side = |n: usize| ((n - 1) * stride + k + output_pad).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (out_side(h), out_side(wd)) else {
            return Err(TensorError::config("conv_transpose2d", "padding exceeds output extent"));
        };
        let bias = self.check_bias("conv_transpose2d", b, o)?;
        let geom = ConvGeom {
            channels: o,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let data = kernels::conv_transpose2d(xt.data(), wt.data(), bias, ci, &geom);
        let value = Tensor::from_parts(vec![o, oh, ow], data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<Option<&[T]>> {
        match b {
            None => Ok(None),
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [channels] {
                    return Err(TensorError::shape(op, &[channels], bt.shape()));
                }
                Ok(Some(bt.data()))
            }
        }
    }

    /// Reflection padding of a `C×H×W` map.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3("pad_reflect")?;
        if pad >= h || pad >= w {
            return Err(TensorError::config(
                "pad_reflect",
                format!("padding {pad} needs a map larger than {h}×{w}"),
            ));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for i in 0..ph {
                let si = kernels::reflect(i as isize - pad as isize, h);
                for j in 0..pw {
                    let sj = kernels::reflect(j as isize - pad as isize, w);
                    out.push(t.data()[(ch * h + si) * w + sj]);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, ph, pw], out);
        Ok(self.push(value, Op::PadReflect { x, pad }, &[x]))
    }

    /// Nearest-neighbour 2× up-sampling of a `C×H×W` map.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3("upsample_nearest2x")?;
        let value = Tensor::from_fn(vec![c, 2 * h, 2 * w], |k| {
            let ch = k / (4 * h * w);
            let rem = k % (4 * h * w);
            let (i, j) = (rem / (2 * w), rem % (2 * w));
            t.data()[(ch * h + i / 2) * w + j / 2]
        });
        Ok(self.push(value, Op::UpsampleNearest(x), &[x]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::config(
                "backward",
                format!("loss must have one element, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(d) {
                        *e = *e + x;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        let zip = |a: &[T], b: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
            a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|&v| -v).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                acc(*a, zip(&g, val(*b), &|p, q| p * q));
                acc(*b, zip(&g, val(*a), &|p, q| p * q));
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) => acc(*x, g),
            Op::Unary(x, kind) => {
                let xv = val(*x);
                let d: Vec<T> = match kind {
                    Unary::Exp => zip(&g, y, &|p, q| p * q),
                    Unary::Log => zip(&g, xv, &|p, q| p / q),
                    Unary::Relu => zip(&g, xv, &|p, q| if q > T::zero() { p } else { T::zero() }),
                    Unary::LeakyRelu(slope) => {
                        let s = T::lit(*slope);
                        zip(&g, xv, &|p, q| if q > T::zero() { p } else { p * s })
                    }
                    Unary::Tanh => zip(&g, y, &|p, q| p * (T::one() - q * q)),
                    Unary::Softplus => zip(&g, xv, &|p, q| p / (T::one() + (-q).exp())),
                    Unary::Square => zip(&g, xv, &|p, q| p * (q + q)),
                };
                acc(*x, d);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SumAxis { x, axis } => {
                let (r, c) = self.value(*x).dims2("sum_axis")?;
                let d = (0..r * c)
                    .map(|k| if *axis == 0 { g[k % c] } else { g[k / c] })
                    .collect();
                acc(*x, d);
            }
            Op::MaxAxis { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).len()];
                for (o, &k) in argmax.iter().enumerate() {
                    d[k] = d[k] + g[o];
                }
                acc(*x, d);
            }
            Op::Reshape(x) => acc(*x, g),
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2("transpose")?;
                let gt = Tensor::from_parts(vec![r, c], g).transpose2d()?;
                acc(*x, gt.into_data());
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, n as isize, 1, val(*b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), 1, k as isize, &g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    acc(*b, db);
                }
            }
            Op::AddRowVector(x, b) => {
                let n = self.value(*b).numel();
                let mut db = vec![T::zero(); n];
                for (k, &v) in g.iter().enumerate() {
                    db[k % n] = db[k % n] + v;
                }
                acc(*b, db);
                acc(*x, g);
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.shape()[1];
                let mut d = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.value.shape()[1];
                let mut d = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - yv.exp() * total;
                    }
                }
                acc(*x, d);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = val(*x);
                let c = node.value.shape()[1];
                let mut d = vec![T::zero(); g.len()];
                for ((dr, gr), xr) in d.chunks_mut(c).zip(g.chunks(c)).zip(xv.chunks(c)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let den = norm + *eps;
                    let dot: T = gr.iter().zip(xr).map(|(&p, &q)| p * q).sum();
                    let coef = if norm > T::zero() { dot / (den * den * norm) } else { T::zero() };
                    for ((dv, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                        *dv = gv / den - xv * coef;
                    }
                }
                acc(*x, d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let plane = node.value.numel() / inv_std.len();
                let n = T::lit(plane as f64);
                let mut d = vec![T::zero(); g.len()];
                for (((dr, gr), yr), &inv) in d.chunks_mut(plane).zip(g.chunks(plane)).zip(y.chunks(plane)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = inv * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, d);
            }
            Op::Unfold { x, window } => {
                let (h, w, c) = self.value(*x).dims3("unfold")?;
                acc(*x, kernels::unfold_hwc_backward(&g, h, w, c, *window));
            }
            Op::AvgPoolHwc { x, factor } => {
                let (h, w, c) = self.value(*x).dims3("avg_pool")?;
                let ow = w / factor;
                let norm = T::lit((factor * factor) as f64);
                let mut d = vec![T::zero(); h * w * c];
                for r in 0..h {
                    for col in 0..w {
                        let src = ((r / factor) * ow + col / factor) * c;
                        let dst = (r * w + col) * c;
                        for ch in 0..c {
                            d[dst + ch] = g[src + ch] / norm;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let o = node.value.shape()[0];
                let need_x = self.nodes[x.0].requires_grad;
                let grads = kernels::conv2d_backward(val(*x), val(*w), &g, o, geom, need_x);
                if need_x {
                    acc(*x, grads.input);
                }
                acc(*w, grads.weight);
                if let Some(b) = b {
                    acc(*b, grads.bias);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let ci = self.value(*x).shape()[0];
                let need_x = self.nodes[x.0].requires_grad;
                let grads = kernels::conv_transpose2d_backward(val(*x), val(*w), &g, ci, geom, need_x);
                if need_x {
                    acc(*x, grads.input);
                }
                acc(*w, grads.weight);
                if let Some(b) = b {
                    acc(*b, grads.bias);
                }
            }
            Op::PadReflect { x, pad } => {
                let (c, h, w) = self.value(*x).dims3("pad_reflect")?;
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..ph {
                        let si = kernels::reflect(i as isize - *pad as isize, h);
                        for j in 0..pw {
                            let sj = kernels::reflect(j as isize - *pad as isize, w);
                            let k = (ch * h + si) * w + sj;
                            d[k] = d[k] + g[(ch * ph + i) * pw + j];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::UpsampleNearest(x) => {
                let (c, h, w) = self.value(*x).dims3("upsample_nearest2x")?;
                let mut d = vec![T::zero(); c * h * w];
                for (k, &gv) in g.iter().enumerate() {
                    let ch = k / (4 * h * w);
                    let rem = k % (4 * h * w);
                    let (i, j) = (rem / (2 * w), rem % (2 * w));
                    let t = (ch * h + i / 2) * w + j / 2;
                    d[t] = d[t] + gv;
                }
                acc(*x, d);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let xt = self.value(*x);
                let stride = xt.numel() / xt.shape()[0].max(1);
                let mut d = vec![T::zero(); xt.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..stride {
                        d[i * stride + k] = d[i * stride + k] + g[r * stride + k];
                    }
                }
                acc(*x, d);
            }
            Op::PickCols { x, idx } => {
                let (_, c) = self.value(*x).dims2("pick_cols")?;
                let mut d = vec![T::zero(); val(*x).len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                acc(*x, d);
            }
            Op::BatchedRowMatVec { a, v } => {
                let (n, k) = self.value(*a).dims2("batched_row_matvec")?;
                let c = node.value.shape()[1];
                let (av, vv) = (val(*a), val(*v));
                let mut da = vec![T::zero(); n * k];
                let mut dv = vec![T::zero(); n * k * c];
                for i in 0..n {
                    let gi = &g[i * c..(i + 1) * c];
                    for j in 0..k {
                        let base = (i * k + j) * c;
                        let vrow = &vv[base..base + c];
                        da[i * k + j] = gi.iter().zip(vrow).map(|(&p, &q)| p * q).sum();
                        let w = av[i * k + j];
                        for (dst, &gval) in dv[base..base + c].iter_mut().zip(gi) {
                            *dst = w * gval;
                        }
                    }
                }
                acc(*a, da);
                acc(*v, dv);
            }
        }
        Ok(())
    }
}

pub(crate) fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(TensorError::config(
            "unfold",
            format!("window size must be odd, got {window}"),
        ));
    }
    Ok(())
}

/// Output side length of a convolution, or `None` when the kernel does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    kernels::conv_out(size, kernel, stride, pad)
}

/// Number of elements for a shape.
pub fn shape_numel(shape: &[usize]) -> usize {
    numel(shape)
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! tape is topologically sorted by construction. [`Graph::backward`] sweeps
//! it once in reverse and accumulates gradients into the leaves that were
//! created with [`Graph::param`].
//!
//! ```
//! use sdgan_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

/// Negative slope of [`Graph::leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Neg,
    Square,
    Sqrt,
    Exp,
    Ln,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Element-wise operation selector for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Unary(Unary),
    Binary(Binary),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Shift(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    IndexRows { src: Var, rows: Vec<usize> },
    SumAll(Var),
    SumAxis { src: Var, axis: usize },
    Softmax { src: Var, axis: usize },
    LogSoftmax { src: Var, axis: usize },
    Conv2d { x: Var, k: Var, bias: Option<Var>, geom: ConvGeometry },
    Upsample2x(Var),
    ChannelMean(Var),
    ChannelVar(Var),
    L2Distance(Var, Var),
    RowL2Distance(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    kink_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any kink-op input to its non-differentiable point
    /// seen so far (relu/leaky-relu at 0, clamps at their threshold, norms at 0).
    /// Only ops on a gradient path count.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kink(&mut self, dist: f64, on_grad_path: bool) {
        if on_grad_path && dist < self.kink_margin {
            self.kink_margin = dist;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is accumulated by [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf; `None` when no loss reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- element-wise ------------------------------------------------------

    /// Dispatches a unary or binary element-wise operation by kind.
    pub fn elementwise(&mut self, kind: OpKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (OpKind::Unary(u), None) => self.unary(u, a),
            (OpKind::Binary(op), Some(b)) => self.binary(op, a, b),
            (OpKind::Unary(_), Some(_)) => Err(Error::invalid("elementwise", "unary op given two operands")),
            (OpKind::Binary(_), None) => Err(Error::invalid("elementwise", "binary op needs two operands")),
        }
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        if op == Binary::Div && cfg!(debug_assertions) && tb.data().iter().any(|&v| v == 0.0) {
            return Err(Error::DivisionByZero { op: name });
        }
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        let (da, db) = (ta.data(), tb.data());
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(da[ia], db[ib]));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&out_shape, out)?, Op::Binary(op, a, b), rg, name)
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

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let name = match op {
            Unary::Relu => "relu",
            Unary::LeakyRelu => "leaky_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Neg => "neg",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
        };
        if matches!(op, Unary::Relu | Unary::LeakyRelu) {
            let m = x.data().iter().map(|v| libm::fabs(*v)).fold(f64::INFINITY, f64::min);
            let rg = self.rg(a);
            self.note_kink(m, rg);
        }
        let x = self.value(a);
        let out: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| match op {
                Unary::Relu => v.max(0.0),
                Unary::LeakyRelu => {
                    if v > 0.0 {
                        v
                    } else {
                        LEAKY_SLOPE * v
                    }
                }
                Unary::Tanh => libm::tanh(v),
                Unary::Sigmoid => sigmoid(v),
                Unary::Neg => -v,
                Unary::Square => v * v,
                Unary::Sqrt => libm::sqrt(v),
                Unary::Exp => libm::exp(v),
                Unary::Ln => libm::log(v),
            })
            .collect();
        let t = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Unary(op, a), rg, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LeakyRelu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Ln, a)
    }

    /// `a · c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg, "shift")
    }

    /// `max(a, c)`; the gradient passes only where `a > c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().map(|v| libm::fabs(v - c)).fold(f64::INFINITY, f64::min);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| if v > c { v } else { c }).collect())?;
        let rg = self.rg(a);
        self.note_kink(m, rg);
        self.push(out, Op::ClampMin(a, c), rg, "clamp_min")
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., M×K] · b[K×N]`; leading axes of `a` are treated as a batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = ta.len() / k;
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::invalid("transpose", "expects a 2-D tensor"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    /// Broadcast copy of `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        match broadcast_shape(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("expand", t.shape(), shape)),
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let sa = broadcast_strides(t.shape(), shape);
        let zero = vec![0; shape.len()];
        let d = t.data();
        for_each_broadcast(shape, &sa, &zero, |i, ia, _| out[i] = d[ia]);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Expand(a), rg, "expand")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.len() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg, "concat")
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid("slice", alloc::format!("range {start}+{len} on axis {axis} of {:?}", t.shape())));
        }
        let (outer, alen, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::Slice { src: a, axis, start }, rg, "slice")
    }

    /// Gathers rows (entries along axis 0); used for embedding lookup.
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let r = t.shape()[0];
        let width = t.len() / r;
        if rows.is_empty() {
            return Err(Error::invalid("index_rows", "no rows selected"));
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        for &i in rows {
            if i >= r {
                return Err(Error::invalid("index_rows", alloc::format!("row {i} out of range {r}")));
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::IndexRows { src: a, rows: rows.to_vec() }, rg, "index_rows")
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid("sum_axis", "axis out of range"));
        }
        let (outer, alen, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let row = &d[(o * alen + k) * inner..(o * alen + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::SumAxis { src: a, axis }, rg, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid("softmax", "axis out of range"));
        }
        let out = softmax_along(t, axis, false);
        let rg = self.rg(a);
        self.push(out, Op::Softmax { src: a, axis }, rg, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid("log_softmax", "axis out of range"));
        }
        let out = softmax_along(t, axis, true);
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax { src: a, axis }, rg, "log_softmax")
    }

    // ---- convolution and resampling ---------------------------------------

    /// Cross-correlation of `x[N×C×H×W]` with `k[O×C×s×s]` plus optional `bias[O]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != sk[3] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(Error::shape("conv2d", sk, self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sk[2],
            stride,
            pad,
        };
        if sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[3] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        let (n, o) = (sx[0], sk[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plane = ho * wo;
        let in_len = geom.channels * geom.height * geom.width;
        let mut col = vec![0.0; geom.patch_len() * plane];
        let mut out = vec![0.0; n * o * plane];
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let (dx, dk) = (tx.data(), tk.data());
        for s in 0..n {
            geom.im2col(&dx[s * in_len..(s + 1) * in_len], &mut col);
            let dst = &mut out[s * o * plane..(s + 1) * o * plane];
            gemm_nn(dk, &col, dst, o, geom.patch_len(), plane, false);
            if let Some(bd) = &bias_data {
                for (ch, &bv) in bd.iter().enumerate() {
                    dst[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let rg = self.rg(x) || self.rg(k) || bias.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, k, bias, geom }, rg, "conv2d")
    }

    /// Nearest-neighbour 2× upsampling of `[N×C×H×W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid("upsample_nearest2x", "expects N×C×H×W"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * 4 * h * w];
        let d = t.data();
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = d[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let shape = [s[0], s[1], 2 * h, 2 * w];
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::Upsample2x(x), rg, "upsample_nearest2x")
    }

    // ---- statistics and distances ----------------------------------------

    /// Per-channel mean and biased variance over (N, H, W) of `x[N×C×H×W]`.
    pub fn channel_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let t = self.value(x);
        if t.ndim() != 4 {
            return Err(Error::invalid("channel_stats", "expects N×C×H×W"));
        }
        let (mean, var) = channel_moments(t);
        let c = t.shape()[1];
        let rg = self.rg(x);
        let m = self.push(Tensor::new(&[c], mean)?, Op::ChannelMean(x), rg, "channel_mean")?;
        let v = self.push(Tensor::new(&[c], var)?, Op::ChannelVar(x), rg, "channel_var")?;
        Ok((m, v))
    }

    /// Euclidean norm of `a − b` as a scalar; subgradient 0 at `a = b`.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("l2_distance", ta.shape(), tb.shape()));
        }
        let d = libm::sqrt(ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum());
        let rg = self.rg(a) || self.rg(b);
        self.note_kink(d, rg);
        self.push(Tensor::scalar(d), Op::L2Distance(a, b), rg, "l2_distance")
    }

    /// Row-wise Euclidean distances of `a[B×K]` and `b[B×K]`, giving `[B]`.
    pub fn row_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.ndim() != 2 {
            return Err(Error::shape("row_l2_distance", ta.shape(), tb.shape()));
        }
        let (rows, k) = (ta.shape()[0], ta.shape()[1]);
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                let s: f64 = ta.data()[r * k..(r + 1) * k]
                    .iter()
                    .zip(&tb.data()[r * k..(r + 1) * k])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                libm::sqrt(s)
            })
            .collect();
        let m = out.iter().copied().fold(f64::INFINITY, f64::min);
        let rg = self.rg(a) || self.rg(b);
        self.note_kink(m, rg);
        self.push(Tensor::new(&[rows], out)?, Op::RowL2Distance(a, b), rg, "row_l2_distance")
    }

    /// Element-wise binary cross-entropy of `sigmoid(logits)` against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + libm::log1p(libm::exp(-libm::fabs(x))))
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(logits);
        self.push(
            Tensor::new(&shape, out)?,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
            "bce_with_logits",
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(leaf) into every gradient-requiring leaf reachable
    /// from `loss`, adding to gradients from earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (da, db) = (ta.data(), tb.data());
                let same = ta.shape() == tb.shape();
                let sa = broadcast_strides(ta.shape(), out.shape());
                let sb = broadcast_strides(tb.shape(), out.shape());
                if wants(*a) {
                    let ga = gbuf(nodes, grads, *a);
                    let mut f = |k: usize, ia: usize, ib: usize| {
                        ga[ia] += match op {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * db[ib],
                            Binary::Div => g[k] / db[ib],
                        }
                    };
                    if same {
                        (0..g.len()).for_each(|k| f(k, k, k));
                    } else {
                        for_each_broadcast(out.shape(), &sa, &sb, f);
                    }
                }
                if wants(*b) {
                    let gb = gbuf(nodes, grads, *b);
                    let mut f = |k: usize, ia: usize, ib: usize| {
                        gb[ib] += match op {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * da[ia],
                            Binary::Div => -g[k] * da[ia] / (db[ib] * db[ib]),
                        }
                    };
                    if same {
                        (0..g.len()).for_each(|k| f(k, k, k));
                    } else {
                        for_each_broadcast(out.shape(), &sa, &sb, f);
                    }
                }
            }
            Op::Unary(op, a) => {
                let x = nodes[a.0].value.data();
                let y = out.data();
                let ga = gbuf(nodes, grads, *a);
                for k in 0..g.len() {
                    let d = match op {
                        Unary::Relu => {
                            if x[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::LeakyRelu => {
                            if x[k] > 0.0 {
                                1.0
                            } else {
                                LEAKY_SLOPE
                            }
                        }
                        Unary::Tanh => 1.0 - y[k] * y[k],
                        Unary::Sigmoid => y[k] * (1.0 - y[k]),
                        Unary::Neg => -1.0,
                        Unary::Square => 2.0 * x[k],
                        Unary::Sqrt => 0.5 / y[k],
                        Unary::Exp => y[k],
                        Unary::Ln => 1.0 / x[k],
                    };
                    ga[k] += g[k] * d;
                }
            }
            Op::Scale(a, c) => {
                let ga = gbuf(nodes, grads, *a);
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += v * c);
            }
            Op::Shift(a) | Op::Reshape(a) => {
                let ga = gbuf(nodes, grads, *a);
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::ClampMin(a, c) => {
                let x = nodes[a.0].value.data();
                let ga = gbuf(nodes, grads, *a);
                for k in 0..g.len() {
                    if x[k] > *c {
                        ga[k] += g[k];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k;
                if wants(*a) {
                    gemm_nt(g, tb.data(), gbuf(nodes, grads, *a), m, n, k, true);
                }
                if wants(*b) {
                    gemm_tn(ta.data(), g, gbuf(nodes, grads, *b), k, m, n, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let ga = gbuf(nodes, grads, *a);
                for i2 in 0..r {
                    for j in 0..c {
                        ga[j * r + i2] += g[i2 * c + j];
                    }
                }
            }
            Op::Expand(a) => {
                let ta = &nodes[a.0].value;
                let sa = broadcast_strides(ta.shape(), out.shape());
                let zero = vec![0; out.ndim()];
                let ga = gbuf(nodes, grads, *a);
                for_each_broadcast(out.shape(), &sa, &zero, |k, ia, _| ga[ia] += g[k]);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let row = out.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.len() / outer;
                    if wants(p) {
                        let gp = gbuf(nodes, grads, p);
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, alen, inner) = split_axis(nodes[src.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                let gs = gbuf(nodes, grads, *src);
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    let src_g = &g[o * len * inner..(o + 1) * len * inner];
                    gs[base..base + len * inner].iter_mut().zip(src_g).for_each(|(d, v)| *d += v);
                }
            }
            Op::IndexRows { src, rows } => {
                let width = out.len() / rows.len();
                let gs = gbuf(nodes, grads, *src);
                for (r, &row) in rows.iter().enumerate() {
                    gs[row * width..(row + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::SumAll(a) => {
                let ga = gbuf(nodes, grads, *a);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumAxis { src, axis } => {
                let (outer, alen, inner) = split_axis(nodes[src.0].value.shape(), *axis);
                let gs = gbuf(nodes, grads, *src);
                for o in 0..outer {
                    for k in 0..alen {
                        let dst = &mut gs[(o * alen + k) * inner..(o * alen + k + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Softmax { src, axis } => {
                let (outer, alen, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let gs = gbuf(nodes, grads, *src);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * alen + k) * inner + j;
                        let dot: f64 = (0..alen).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..alen {
                            gs[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { src, axis } => {
                let (outer, alen, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let gs = gbuf(nodes, grads, *src);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * alen + k) * inner + j;
                        let total: f64 = (0..alen).map(|k| g[idx(k)]).sum();
                        for k in 0..alen {
                            gs[idx(k)] += g[idx(k)] - libm::exp(y[idx(k)]) * total;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, bias, geom } => {
                let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
                let n = tx.shape()[0];
                let o = tk.shape()[0];
                let plane = geom.out_height() * geom.out_width();
                let in_len = geom.channels * geom.height * geom.width;
                let plen = geom.patch_len();
                if let Some(b) = bias {
                    if wants(*b) {
                        let gb = gbuf(nodes, grads, *b);
                        for s in 0..n {
                            for ch in 0..o {
                                let base = (s * o + ch) * plane;
                                gb[ch] += g[base..base + plane].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let mut col = vec![0.0; plen * plane];
                if wants(*k) {
                    let gk = gbuf(nodes, grads, *k);
                    for s in 0..n {
                        geom.im2col(&tx.data()[s * in_len..(s + 1) * in_len], &mut col);
                        gemm_nt(&g[s * o * plane..(s + 1) * o * plane], &col, gk, o, plane, plen, true);
                    }
                }
                if wants(*x) {
                    let gx = gbuf(nodes, grads, *x);
                    for s in 0..n {
                        gemm_tn(tk.data(), &g[s * o * plane..(s + 1) * o * plane], &mut col, plen, o, plane, false);
                        geom.col2im(&col, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s = nodes[a.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let ga = gbuf(nodes, grads, *a);
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            ga[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
            }
            Op::ChannelMean(a) => {
                let s = nodes[a.0].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (n * hw) as f64;
                let ga = gbuf(nodes, grads, *a);
                for b in 0..n {
                    for ch in 0..c {
                        let v = g[ch] / count;
                        ga[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::ChannelVar(a) => {
                let t = &nodes[a.0].value;
                let s = t.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (n * hw) as f64;
                let (mean, _) = channel_moments(t);
                let x = t.data();
                let ga = gbuf(nodes, grads, *a);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let scale = 2.0 * g[ch] / count;
                        for k in base..base + hw {
                            ga[k] += scale * (x[k] - mean[ch]);
                        }
                    }
                }
            }
            Op::L2Distance(a, b) => {
                let d = out.data()[0];
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let s = if d > 0.0 { g[0] / d } else { 0.0 };
                for (sign, v) in [(1.0, *a), (-1.0, *b)] {
                    if wants(v) {
                        let gv = gbuf(nodes, grads, v);
                        for k in 0..da.len() {
                            gv[k] += sign * s * (da[k] - db[k]);
                        }
                    }
                }
            }
            Op::RowL2Distance(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let rows = out.len();
                let width = da.len() / rows;
                for (sign, v) in [(1.0, *a), (-1.0, *b)] {
                    if !wants(v) {
                        continue;
                    }
                    let gv = gbuf(nodes, grads, v);
                    for r in 0..rows {
                        let d = out.data()[r];
                        if d > 0.0 {
                            let s = sign * g[r] / d;
                            for k in r * width..(r + 1) * width {
                                gv[k] += s * (da[k] - db[k]);
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let x = nodes[logits.0].value.data();
                let gl = gbuf(nodes, grads, *logits);
                for k in 0..g.len() {
                    gl[k] += g[k] * (sigmoid(x[k]) - targets[k]);
                }
            }
        }
    }
}

fn gbuf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, alen, inner) = split_axis(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |k: usize| (o * alen + k) * inner + j;
            let m = (0..alen).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..alen).map(|k| libm::exp(d[idx(k)] - m)).sum();
            for k in 0..alen {
                out[idx(k)] = if log {
                    d[idx(k)] - m - libm::log(z)
                } else {
                    libm::exp(d[idx(k)] - m) / z
                };
            }
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

fn channel_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let count = (n * hw) as f64;
    let d = t.data();
    let mut mean = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            mean[ch] += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            var[ch] += d[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

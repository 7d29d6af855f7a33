//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value plus whatever the
//! backward rule needs. [`Graph::backward`] walks the tape once in reverse and
//! leaves gradients on the leaves that were created with `requires_grad`.

use std::sync::Arc;

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Reshape(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    SelectiveScan(Box<ScanSaved<T>>),
    WeightedSquaredError { pred: Var, target: Arc<Tensor<T>>, weights: Vec<T>, denom: T },
    WeightedAbsError { pred: Var, target: Arc<Tensor<T>>, weights: Vec<T>, denom: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, denom: T, probs: Vec<T> },
}

struct ScanSaved<T> {
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    /// Hidden state after each step, `[L][D][N]` flattened.
    states: Vec<T>,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(..) => "sum",
            Op::SelectiveScan(..) => "selective_scan",
            Op::WeightedSquaredError { .. } => "masked_mse",
            Op::WeightedAbsError { .. } => "masked_l1",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Gelu(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::SelectiveScan(s) => vec![s.x, s.delta, s.a, s.b, s.c],
            Op::WeightedSquaredError { pred, .. } | Op::WeightedAbsError { pred, .. } => vec![*pred],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Autodiff tape. Confined to one thread; values are shared via `Arc`.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backpropagated: bool,
    audit_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_fwd<T: Real>(x: T) -> T {
    x * T::lit(0.5) * (T::one() + (x / T::lit(SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x / T::lit(SQRT_2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Zero-order-hold input factor `(exp(dt·a) − 1)/a`, equal to `dt` in the `a → 0` limit.
pub(crate) fn zoh_factor<T: Real>(dt: T, a: T) -> T {
    let z = dt * a;
    if z.abs() < T::lit(1e-8) {
        dt * (T::one() + z * T::lit(0.5))
    } else {
        z.exp_m1() / a
    }
}

/// Partial derivative of [`zoh_factor`] with respect to `a`.
fn zoh_factor_da<T: Real>(dt: T, a: T) -> T {
    let z = dt * a;
    if z.abs() < T::lit(1e-4) {
        // dt² · (1/2 + z/3 + z²/8 + z³/30)
        dt * dt * (T::lit(0.5) + z * (T::lit(1.0 / 3.0) + z * (T::lit(0.125) + z * T::lit(1.0 / 30.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (a * a)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
            audit_finite: false,
        }
    }

    /// Graph that rejects any op producing NaN or Inf.
    pub fn with_finite_audit() -> Self {
        let mut g = Self::new();
        g.audit_finite = true;
        g
    }

    pub fn set_finite_audit(&mut self, on: bool) {
        self.audit_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by all node values.
    pub fn activation_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * std::mem::size_of::<T>()).sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let idx = self.nodes.len();
        if self.audit_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: idx });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(idx))
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var> {
        let idx = self.nodes.len();
        if self.audit_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf", node: idx });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(idx))
    }

    /// Leaf whose gradient will be populated by [`Graph::backward`].
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    /// Detached input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass for a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Forget gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    // ---- linear algebra -------------------------------------------------

    /// `op(a) · op(b)` for matrices, with optional transposition of either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, beta, &mut out);
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = dout;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            Ok(ta.map(|x| f(x, s)))
        } else if ta.numel() == 1 {
            let s = ta.data()[0];
            Ok(tb.map(|y| f(s, y)))
        } else {
            Err(Error::shape(name, ta.shape(), tb.shape()))
        }
    }

    /// Elementwise sum; equal shapes or one side a single-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddConst(x))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu_fwd);
        self.push(v, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.exp());
        self.push(v, Op::Exp(x))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid_shape("softmax", &shape, format!("axis {axis} out of range")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut mx = T::neg_infinity();
                for i in 0..len {
                    mx = mx.max(src[at(i)]);
                }
                let mut z = T::zero();
                for i in 0..len {
                    let e = (src[at(i)] - mx).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / z;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    /// Normalize over the last axis, then apply `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if t.rank() == 0 || d == 0 {
            return Err(Error::invalid_shape("layernorm", t.shape(), "last axis must be non-empty"));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layernorm", t.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.rows();
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        let mut stats = Vec::with_capacity(rows);
        let inv_d = T::one() / T::lit(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * rstd * g[i] + b[i];
            }
            stats.push((mean, rstd));
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, stats })
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", t.shape(), &shape));
        }
        let v = Tensor::new(shape, t.data().to_vec())?;
        self.push(v, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        self.push(v, Op::Transpose(x))
    }

    /// Rows `start..start+len` of the matrix view over the last axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        if start + len > t.rows() {
            return Err(Error::invalid_shape(
                "slice_rows",
                t.shape(),
                format!("rows {start}..{} out of range", start + len),
            ));
        }
        let v = Tensor::new([len, w], t.data()[start * w..(start + len) * w].to_vec())?;
        self.push(v, Op::SliceRows { x, start })
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.shape()[1] {
            return Err(Error::invalid_shape(
                "slice_cols",
                t.shape(),
                format!("cols {start}..{} out of range", start + len),
            ));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new([r, len], data)?, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let w = self.value(first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != w {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::new([rows, w], data)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let r = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new([r, total], data)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `idx` (repeats allowed) of the matrix view over the last axis.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(idx)?;
        self.push(v, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n.max(1) as f64))
    }

    // ---- fused kernels ---------------------------------------------------

    /// Diagonal selective state-space recurrence with zero-order-hold steps.
    ///
    /// Shapes: `x`, `delta` are `[L, D]`; `a` is `[D, N]`; `b`, `c` are `[L, N]`.
    /// Per channel `d` and state `n`:
    /// `h_t = exp(Δ_t a) h_{t-1} + ((exp(Δ_t a) − 1)/a) b_t x_t`, `y_t = Σ_n c_t h_t`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (sx, sd, sa, sb, sc) = (
            self.shape(x).to_vec(),
            self.shape(delta),
            self.shape(a),
            self.shape(b),
            self.shape(c),
        );
        if sx.len() != 2 || sd != sx.as_slice() {
            return Err(Error::shape("selective_scan delta", &sx, sd));
        }
        let (l, d) = (sx[0], sx[1]);
        if sa.len() != 2 || sa[0] != d {
            return Err(Error::shape("selective_scan a", &sx, sa));
        }
        let n = sa[1];
        if sb != [l, n] || sc != [l, n] {
            return Err(Error::shape("selective_scan b/c", sb, sc));
        }
        let (xv, dv, av, bv, cv) = (
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let mut states = vec![T::zero(); l * d * n];
        let mut y = vec![T::zero(); l * d];
        for ch in 0..d {
            for s in 0..n {
                let a_ds = av[ch * n + s];
                let mut h = T::zero();
                for t in 0..l {
                    let dt = dv[t * d + ch];
                    let decay = (dt * a_ds).exp();
                    h = decay * h + zoh_factor(dt, a_ds) * bv[t * n + s] * xv[t * d + ch];
                    states[(t * d + ch) * n + s] = h;
                    y[t * d + ch] += cv[t * n + s] * h;
                }
            }
        }
        let saved = ScanSaved {
            x,
            delta,
            a,
            b,
            c,
            states,
        };
        self.push(Tensor::new([l, d], y)?, Op::SelectiveScan(Box::new(saved)))
    }

    /// `Σ w_i (pred_i − target_i)² / denom`.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: Arc<Tensor<T>>,
        weights: Vec<T>,
        denom: T,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.len() != p.numel() {
            return Err(Error::shape("masked_mse", p.shape(), target.shape()));
        }
        let mut acc = T::zero();
        for ((&a, &b), &w) in p.data().iter().zip(target.data()).zip(&weights) {
            acc += w * (a - b) * (a - b);
        }
        self.push(
            Tensor::scalar(acc / denom),
            Op::WeightedSquaredError { pred, target, weights, denom },
        )
    }

    /// `Σ w_i |pred_i − target_i| / denom`.
    pub fn weighted_abs_error(
        &mut self,
        pred: Var,
        target: Arc<Tensor<T>>,
        weights: Vec<T>,
        denom: T,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.len() != p.numel() {
            return Err(Error::shape("masked_l1", p.shape(), target.shape()));
        }
        let mut acc = T::zero();
        for ((&a, &b), &w) in p.data().iter().zip(target.data()).zip(&weights) {
            acc += w * (a - b).abs();
        }
        self.push(
            Tensor::scalar(acc / denom),
            Op::WeightedAbsError { pred, target, weights, denom },
        )
    }

    /// `Σ_r w_r · (−log softmax(logits_r)[target_r]) / denom` over rows of a `[R, C]` matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Vec<T>, denom: T) -> Result<Var> {
        let t = self.value(logits);
        let shape = t.shape().to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || weights.len() != shape[0] {
            return Err(Error::invalid_shape(
                "cross_entropy",
                &shape,
                format!("expects {} targets and weights", shape.first().copied().unwrap_or(0)),
            ));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidArgument(format!(
                "class id {bad} out of range for {classes} classes"
            )));
        }
        let src = t.data();
        let mut probs = vec![T::zero(); rows * classes];
        let mut acc = T::zero();
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
            if weights[r] != T::zero() {
                acc += weights[r] * (log_z - row[targets[r]]);
            }
        }
        self.push(
            Tensor::scalar(acc / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                denom,
                probs,
            },
        )
    }

    // ---- backward -------------------------------------------------------

    /// Populate gradients of `loss` for every leaf that requires them.
    ///
    /// A second call without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            // parents always precede children on the tape
            debug_assert!(node.op.parents().iter().all(|p| p.0 < i), "tape order");
            self.backward_node(i, g, &mut grads)?;
        }
        // only leaves keep gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        self.grads = grads;
        self.backpropagated = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // dA (k×m) = op(B) · dCᵀ
                        gemm(k, n, m, bv.data(), *tb, gd, true, T::zero(), &mut da);
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        gemm(m, n, k, gd, false, bv.data(), !*tb, T::zero(), &mut da);
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // dB (n×k) = dCᵀ · op(A)
                        gemm(n, m, k, gd, true, av.data(), *ta, T::zero(), &mut db);
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        gemm(k, m, n, av.data(), !*ta, gd, false, T::zero(), &mut db);
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / din.max(1);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(rows, dout, din, gd, false, wv.data(), true, T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(din, rows, dout, xv.data(), true, gd, false, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for r in 0..rows {
                            for (o, &v) in db.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                                *o += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.reduce_into(grads, *a, &g, |v, _| v)?;
                self.reduce_into(grads, *b, &g, |v, _| v * sign)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.reduce_into(grads, *a, &g, |v, idx| v * pick(&bv, idx))?;
                self.reduce_into(grads, *b, &g, |v, idx| v * pick(&av, idx))?;
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, Tensor::new(shape, g.into_data())?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(gd).map(|(&v, &gv)| gv * gelu_grad(v)).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(gd).map(|(&v, &gv)| gv * sigmoid(v)).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Exp(x) => {
                let d = out.data().iter().zip(gd).map(|(&y, &gv)| gv * y).collect();
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Softmax { x, axis } => {
                let shape = out.shape();
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let s = out.data();
                let mut dx = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: T = (0..len).map(|i| gd[at(i)] * s[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = s[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(shape.to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = xv.last_dim();
                let rows = xv.rows();
                let src = xv.data();
                let mut dx = vec![T::zero(); src.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let inv_d = T::one() / T::lit(d as f64);
                let mut xhat = vec![T::zero(); d];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for k in 0..d {
                        xhat[k] = (src[r * d + k] - mean) * rstd;
                        let dxh = gr[k] * gam[k];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[k];
                        dgamma[k] += gr[k] * xhat[k];
                        dbeta[k] += gr[k];
                    }
                    for k in 0..d {
                        let dxh = gr[k] * gam[k];
                        dx[r * d + k] = rstd * (dxh - sum_dxh * inv_d - xhat[k] * sum_dxh_xh * inv_d);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma)?);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbeta)?);
                }
            }
            Op::Transpose(x) => {
                accumulate(grads, *x, g.transpose()?);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                dx[start * w..start * w + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let len = out.shape()[1];
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, Tensor::new([r, c], dx)?);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        let shape = self.shape(p).to_vec();
                        accumulate(grads, p, Tensor::new(shape, gd[off..off + n].to_vec())?);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape()[0], out.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        accumulate(grads, p, Tensor::new([r, w], d)?);
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                for (k, &row) in idx.iter().enumerate() {
                    for (o, &v) in dx[row * w..(row + 1) * w].iter_mut().zip(&gd[k * w..(k + 1) * w]) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::SelectiveScan(s) => self.scan_backward(s, gd, grads)?,
            Op::WeightedSquaredError { pred, target, weights, denom } => {
                let pv = self.value(*pred);
                let k = gd[0] * T::lit(2.0) / *denom;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights)
                    .map(|((&p, &t), &w)| k * w * (p - t))
                    .collect();
                accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::WeightedAbsError { pred, target, weights, denom } => {
                let pv = self.value(*pred);
                let k = gd[0] / *denom;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let diff = p - t;
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        k * w * sign
                    })
                    .collect();
                accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::CrossEntropy { logits, targets, weights, denom, probs } => {
                let shape = self.shape(*logits).to_vec();
                let classes = shape[1];
                let k = gd[0] / *denom;
                let mut d = vec![T::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        d[r * classes + c] = k * w * (probs[r * classes + c] - onehot);
                    }
                }
                accumulate(grads, *logits, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }

    /// Route an output gradient to an operand, summing it down when the operand was a broadcast scalar.
    fn reduce_into(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        g: &Tensor<T>,
        f: impl Fn(T, usize) -> T,
    ) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        let shape = self.shape(v).to_vec();
        let mapped: Vec<T> = g.data().iter().enumerate().map(|(i, &x)| f(x, i)).collect();
        if shape.iter().product::<usize>() == g.numel() {
            accumulate(grads, v, Tensor::new(shape, mapped)?);
        } else {
            let s: T = mapped.into_iter().sum();
            accumulate(grads, v, Tensor::new(shape, vec![s])?);
        }
        Ok(())
    }

    fn scan_backward(&self, s: &ScanSaved<T>, gy: &[T], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let (l, d) = (self.shape(s.x)[0], self.shape(s.x)[1]);
        let n = self.shape(s.a)[1];
        let (xv, dv, av, bv, cv) = (
            self.value(s.x).data(),
            self.value(s.delta).data(),
            self.value(s.a).data(),
            self.value(s.b).data(),
            self.value(s.c).data(),
        );
        let mut dx = vec![T::zero(); l * d];
        let mut ddelta = vec![T::zero(); l * d];
        let mut da = vec![T::zero(); d * n];
        let mut db = vec![T::zero(); l * n];
        let mut dc = vec![T::zero(); l * n];
        for ch in 0..d {
            for st in 0..n {
                let a_ds = av[ch * n + st];
                let mut dh = T::zero();
                for t in (0..l).rev() {
                    let h_t = s.states[(t * d + ch) * n + st];
                    let gyt = gy[t * d + ch];
                    dc[t * n + st] += gyt * h_t;
                    dh += gyt * cv[t * n + st];
                    let h_prev = if t > 0 { s.states[((t - 1) * d + ch) * n + st] } else { T::zero() };
                    let dt = dv[t * d + ch];
                    let decay = (dt * a_ds).exp();
                    let f = zoh_factor(dt, a_ds);
                    let (bt, xt) = (bv[t * n + st], xv[t * d + ch]);
                    // h_t = decay·h_prev + f·b·x
                    let d_decay = dh * h_prev;
                    let d_f = dh * bt * xt;
                    db[t * n + st] += dh * f * xt;
                    dx[t * d + ch] += dh * f * bt;
                    ddelta[t * d + ch] += d_decay * decay * a_ds + d_f * decay;
                    da[ch * n + st] += d_decay * decay * dt + d_f * zoh_factor_da(dt, a_ds);
                    dh = dh * decay;
                }
            }
        }
        for (v, data) in [(s.x, dx), (s.delta, ddelta), (s.a, da), (s.b, db), (s.c, dc)] {
            if self.wants(v) {
                let shape = self.shape(v).to_vec();
                accumulate(grads, v, Tensor::new(shape, data)?);
            }
        }
        Ok(())
    }
}

fn pick<T: Real>(t: &Tensor<T>, idx: usize) -> T {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[idx]
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut rng = crate::tensor::Rng::new(5);
        let a = Tensor::<f64>::from_fn([5, 7], |_| rng.normal());
        let b = Tensor::<f64>::from_fn([7, 3], |_| rng.normal());
        let mut g = Graph::new();
        let va = g.leaf(a, true).unwrap();
        let vb = g.constant(b.clone()).unwrap();
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        // oracle: d sum(AB)/dA = 1·Bᵀ, so row i col p = Σ_j B[p][j]
        let expect: Vec<f64> = (0..5)
            .flat_map(|_| (0..7).map(|p| (0..3).map(|j| b.at(&[p, j])).sum::<f64>()).collect::<Vec<_>>())
            .collect();
        for (x, y) in g.grad(va).unwrap().data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_squares_grad_is_twice_x() {
        let x = t(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true).unwrap();
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), x.map(|e| 2.0 * e).data());
    }

    #[test]
    fn detached_input_gets_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let p = g.leaf(t(&[2], &[3.0, 4.0]), true).unwrap();
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[2], &[3.0, 4.0]), true).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::AlreadyBackpropagated)));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[2], &[3.0, 4.0]), true).unwrap();
        assert!(matches!(g.backward(p), Err(Error::NotScalar(_))));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = g.constant(t(&[1], &[10.0])).unwrap();
        let r = g.add(a, s).unwrap();
        assert_eq!(g.value(r).data(), &[11.0, 12.0, 13.0, 14.0]);
        let zero = g.constant(Tensor::zeros([2, 2])).unwrap();
        let same = g.add(a, zero).unwrap();
        assert_eq!(g.value(same), g.value(a));
        let row = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        assert!(g.add(a, row).is_err());
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 1.0])).unwrap();
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        // 1·Φ(1), Φ(1) = 0.841344746068543
        assert!((g.value(y).data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[2.0, 2.0, 2.0, 0.0, 3f64.ln(), -1e9])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data().to_vec();
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 0.25).abs() < 1e-12 && (v[4] - 0.75).abs() < 1e-12);
        let shifted = g.add_const(x, 123.456).unwrap();
        let ys = g.softmax(shifted, 1).unwrap();
        assert!(g.value(ys).max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn finite_audit_reports_location() {
        let mut g = Graph::<f64>::with_finite_audit();
        let x = g.constant(t(&[1], &[1000.0])).unwrap();
        let err = g.exp(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp", node: 1 }), "{err}");
    }

    #[test]
    fn zoh_limit_is_continuous() {
        let dt: f64 = 0.7;
        let near = zoh_factor(dt, 1e-7);
        assert!((near - dt).abs() < 1e-6);
        let below = zoh_factor_da(dt, 1e-6);
        let above = zoh_factor_da(dt, 1e-3);
        assert!((below - dt * dt / 2.0).abs() < 1e-6);
        assert!((above - below).abs() < 1e-3);
    }
}

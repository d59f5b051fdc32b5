//! Recorded computation graph with reverse-mode gradients.
//!
//! Every forward method appends one node holding its output value plus
//! whatever the backward rule needs. [`Graph::backward`] walks the nodes in
//! reverse and accumulates gradients for parameters and for inputs created
//! with `requires_grad`. Summation order is fixed, so forward and backward are
//! bit-deterministic for a given build.

use crate::error::{shape_err, DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    SubScalar(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Transpose(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry, cols: Option<Vec<T>> },
    Upsample2x(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, outer: usize, lens: Vec<usize>, inner: usize },
    Narrow { x: Var, outer: usize, len: usize, inner: usize, start: usize, width: usize },
    Reshape(Var),
    RepeatRows { x: Var, n: usize },
    Pick { x: Var, index: usize },
    MinAll { x: Var, index: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a graph node, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed by `ParamId::index`.
    pub fn into_param_grads(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, deps: &[Var]) -> Var {
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf. With `requires_grad` the backward pass reports its gradient.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Input, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.map(x, |v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x + c` for a constant scalar `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.map(x, |v| v + c);
        self.push(out, Op::Offset(x), &[x])
    }

    /// `x - s` with `s` a one-element node broadcast over `x`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("sub_scalar", format!("rhs has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let out = self.map(x, |v| v - sv);
        Ok(self.push(out, Op::SubScalar(x, s), &[x, s]))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(rows, din, dout, T::one(), self.value(x).data(), false, self.value(w).data(), false, beta, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let deps: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b, rows, din, dout }, &deps))
    }

    /// 2-D product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} not 2-D")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents {k} and {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?} not 2-D")));
        }
        let out = transpose_data(self.value(x).data(), s[0], s[1]);
        Ok(self.push(Tensor::new(&[s[1], s[0]], out)?, Op::Transpose(x), &[x]))
    }

    /// Square-kernel convolution over an `[h, w, cin]` image with zero padding
    /// `k / 2`. `w` is `[k, k, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[2] || stride == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?} with kernel {ws:?}, stride {stride}")));
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[3]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let pad = k / 2;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("input {xs:?} smaller than kernel {k}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeometry { h, w: wd, cin, cout, k, stride, pad, ho, wo };
        let direct = k == 1 && stride == 1;
        let cols = if direct { None } else { Some(im2col(self.value(x).data(), &geo)) };
        let kk = k * k * cin;
        let mut out = vec![T::zero(); ho * wo * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(cout) {
                r.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        {
            let lhs = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            T::gemm(ho * wo, kk, cout, T::one(), lhs, false, self.value(w).data(), false, beta, &mut out);
        }
        let deps: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(Tensor::new(&[ho, wo, cout], out)?, Op::Conv { x, w, b, geo, cols }, &deps))
    }

    /// Nearest-neighbour 2x spatial upsampling of an `[h, w, c]` image.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("{s:?} not [h, w, c]")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let from = ((y / 2) * w + xx / 2) * c;
                let to = (y * 2 * w + xx) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        Ok(self.push(Tensor::new(&[2 * h, 2 * w, c], out)?, Op::Upsample2x(x), &[x]))
    }

    /// Normalizes over the last axis then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("affine params for width {d}")));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = g[i] * xh + bt[i];
            }
        }
        Ok(self.push(Tensor::new(&s, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.map(x, softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::new(&s, out)?, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Mean over the spatial axes of an `[h, w, c]` image.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("global_avg_pool", format!("{s:?} not [h, w, c]")));
        }
        let c = s[2];
        let n = s[0] * s[1];
        let mut out = vec![T::zero(); c];
        for px in self.value(x).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += *v;
            }
        }
        let inv = T::lit(1.0 / n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::new(&[c], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), outer, lens, inner }, parts))
    }

    /// Slice `[start, start + width)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + width > s[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + width)));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x, outer, len, inner, start, width }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Broadcasts a `[d]` vector to `[n, d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(shape_err("repeat_rows", format!("{s:?} not a vector")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * s[0]);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        Ok(self.push(Tensor::new(&[n, s[0]], out)?, Op::RepeatRows { x, n }, &[x]))
    }

    /// Scalar at flat position `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(shape_err("pick", format!("index {index} of {} entries", t.len())));
        }
        let v = t.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x]))
    }

    /// Global minimum; the gradient goes to the first minimizer in scan order.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("min_all", "empty input"));
        }
        let mut index = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v < t.data()[index] {
                index = i;
            }
        }
        let v = t.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::MinAll { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(DiffError::NonFiniteValue("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let dy = match (&node.op, grads[i].as_ref()) {
                (Op::Input, _) => continue,
                (Op::Param(id), Some(g)) => {
                    accumulate(&mut pgrads[id.index()], g);
                    continue;
                }
                (_, Some(_)) => grads[i].take().expect("checked"),
                (_, None) => continue,
            };
            self.backward_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { nodes: grads, params: pgrads })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if !self.needs(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v), data).expect("gradient matches value shape")
    }

    fn backward_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = self.nodes[i].value.as_ref().expect("computed node");
        let g = dy.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.send(grads, *a, dy.clone());
                self.send(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, dy.clone());
                let neg = g.iter().map(|&v| -v).collect();
                self.send(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let d = g.iter().zip(bv).map(|(&u, &v)| u * v).collect();
                    self.send(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let d = g.iter().zip(av).map(|(&u, &v)| u * v).collect();
                    self.send(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(x, s) => {
                let d = g.iter().map(|&v| v * *s).collect();
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Offset(x) | Op::Reshape(x) => {
                self.send(grads, *x, self.like(*x, g.to_vec()));
            }
            Op::SubScalar(x, s) => {
                self.send(grads, *x, dy.clone().reshape(self.shape(*x))?);
                let total = g.iter().copied().sum::<T>();
                self.send(grads, *s, self.like(*s, vec![-total]));
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(rows, dout, din, T::one(), g, false, self.value(*w).data(), true, T::zero(), &mut dx);
                    self.send(grads, *x, self.like(*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, T::one(), self.value(*x).data(), true, g, false, T::zero(), &mut dw);
                    self.send(grads, *w, self.like(*w, dw));
                }
                if let Some(b) = b {
                    self.send(grads, *b, self.like(*b, column_sums(g, dout)));
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    // d op(a) = g · op(b)^T, shaped m x k
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // a is stored k x m: da_stored = op(b) · g^T
                        T::gemm(k, n, m, T::one(), bv, *tb, g, true, T::zero(), &mut da);
                    } else {
                        T::gemm(m, n, k, T::one(), g, false, bv, !*tb, T::zero(), &mut da);
                    }
                    self.send(grads, *a, self.like(*a, da));
                }
                if self.needs(*b) {
                    // d op(b) = op(a)^T · g, shaped k x n
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // b is stored n x k: db_stored = g^T · op(a)
                        T::gemm(n, m, k, T::one(), g, true, av, *ta, T::zero(), &mut db);
                    } else {
                        T::gemm(k, m, n, T::one(), av, !*ta, g, false, T::zero(), &mut db);
                    }
                    self.send(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let d = transpose_data(g, s[0], s[1]);
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Conv { x, w, b, geo, cols } => {
                let kk = geo.k * geo.k * geo.cin;
                let npx = geo.ho * geo.wo;
                if self.needs(*w) {
                    let lhs = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    let mut dw = vec![T::zero(); kk * geo.cout];
                    T::gemm(kk, npx, geo.cout, T::one(), lhs, true, g, false, T::zero(), &mut dw);
                    self.send(grads, *w, self.like(*w, dw));
                }
                if let Some(b) = b {
                    self.send(grads, *b, self.like(*b, column_sums(g, geo.cout)));
                }
                if self.needs(*x) {
                    let mut dcol = vec![T::zero(); npx * kk];
                    T::gemm(npx, geo.cout, kk, T::one(), g, false, self.value(*w).data(), true, T::zero(), &mut dcol);
                    let dx = if cols.is_some() { col2im(&dcol, geo) } else { dcol };
                    self.send(grads, *x, self.like(*x, dx));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let to = ((y / 2) * w + xx / 2) * c;
                        let from = (y * 2 * w + xx) * c;
                        for ch in 0..c {
                            dx[to + ch] += g[from + ch];
                        }
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *self.shape(*gamma).first().expect("vector");
                let gv = self.value(*gamma).data();
                let rows = rstd.len();
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.send(grads, *gamma, self.like(*gamma, dg));
                }
                if self.needs(*beta) {
                    self.send(grads, *beta, self.like(*beta, column_sums(g, d)));
                }
                if self.needs(*x) {
                    let dn = T::lit(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    self.send(grads, *x, self.like(*x, dx));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&u, &v)| u * gelu_grad(v)).collect();
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out.data()).map(|(&u, &s)| u * s * (T::one() - s)).collect();
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&u, &v)| if v > T::zero() { u } else { T::zero() }).collect();
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&u, &v)| {
                        if v > T::zero() {
                            u
                        } else if v < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&u, &v)| u * sigmoid(v)).collect();
                self.send(grads, *x, self.like(*x, d));
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let c = s[2];
                let inv = T::lit(1.0 / (s[0] * s[1]) as f64);
                let mut dx = Vec::with_capacity(s[0] * s[1] * c);
                for _ in 0..s[0] * s[1] {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Concat { parts, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut start = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.send(grads, p, self.like(p, d));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, outer, len, inner, start, width } => {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    let base = (o * len + start) * inner;
                    let src = o * width * inner;
                    dx[base..base + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::RepeatRows { x, n } => {
                let d = self.value(*x).len();
                let mut dx = vec![T::zero(); d];
                for r in 0..*n {
                    for j in 0..d {
                        dx[j] += g[r * d + j];
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Pick { x, index } | Op::MinAll { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[*index] = g[0];
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, self.like(*x, vec![g[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::lit(n as f64);
                self.send(grads, *x, self.like(*x, vec![v; n]));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    out
}

fn transpose_data<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn im2col<T: Real>(x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let kk = geo.k * geo.k * geo.cin;
    let mut cols = vec![T::zero(); geo.ho * geo.wo * kk];
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let row = &mut cols[(oy * geo.wo + ox) * kk..(oy * geo.wo + ox + 1) * kk];
            for ky in 0..geo.k {
                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                if iy < 0 || iy >= geo.h as isize {
                    continue;
                }
                for kx in 0..geo.k {
                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                    if ix < 0 || ix >= geo.w as isize {
                        continue;
                    }
                    let src = (iy as usize * geo.w + ix as usize) * geo.cin;
                    let dst = (ky * geo.k + kx) * geo.cin;
                    row[dst..dst + geo.cin].copy_from_slice(&x[src..src + geo.cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcol: &[T], geo: &ConvGeometry) -> Vec<T> {
    let kk = geo.k * geo.k * geo.cin;
    let mut dx = vec![T::zero(); geo.h * geo.w * geo.cin];
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let row = &dcol[(oy * geo.wo + ox) * kk..(oy * geo.wo + ox + 1) * kk];
            for ky in 0..geo.k {
                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                if iy < 0 || iy >= geo.h as isize {
                    continue;
                }
                for kx in 0..geo.k {
                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                    if ix < 0 || ix >= geo.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * geo.w + ix as usize) * geo.cin;
                    let src = (ky * geo.k + kx) * geo.cin;
                    for c in 0..geo.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    dx
}

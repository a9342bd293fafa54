//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive executed in a forward pass together
//! with whatever it needs for the backward pass. [`Graph::backward`] walks
//! the tape in exact reverse order, writes parameter gradients into the
//! [`ParamStore`] and then drops the recorded activations.
//!
//! Layout conventions: images are NHWC, token sequences are `[N, S, C]`,
//! and projection weights are stored `[out, in]` so a linear layer is
//! `x · Wᵀ`. Elementwise broadcasting is limited to the right operand
//! matching a suffix of the left operand's shape.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddPerSample { x: Var, v: Var },
    Scale { x: Var, s: T },
    Conv2d { x: Var, k: Var, geo: ConvGeometry, cols: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Gelu { x: Var },
    Mse { a: Var, b: Var },
    MeanAll { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    ConcatLast { a: Var, b: Var },
    Upsample2 { x: Var },
    MeanMid { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the non-parameter leaves created with [`Graph::leaf`].
#[derive(Debug, Default)]
pub struct LeafGrads<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> LeafGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }
}

/// Ordered record of the primitives executed in one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A graph for pure evaluation: nothing requires gradients and no
    /// activations are saved for a backward pass.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.consumed = false;
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

    /// Number of recorded nodes that take part in the backward pass.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    /// Parameters reachable through gradient-carrying nodes.
    pub fn grad_params(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) if n.requires_grad => Some(id),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter onto the tape. Gradients flow to it only when it
    /// is trainable and not frozen.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.requires_grad() && self.grad_enabled;
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param(id), requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- matmul

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let batch = numel(lead_a);
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead_a {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b, batch, m, k, n, shared_rhs }, rg)
    }

    /// `a · b` with `a: [..., M, K]` and `b: [K, N]` (shared) or `[..., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b: [N, K]` (shared) or `[..., N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    // ----------------------------------------------------------- elementwise

    fn broadcast_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(op, sa, sb));
        }
        let inner = numel(sb);
        Ok((numel(sa) / inner, inner))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (outer, inner) = self.broadcast_dims(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let row = &av.data()[o * inner..(o + 1) * inner];
            out.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(av.shape(), out)
    }

    /// Elementwise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", v, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", v, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", v, Op::Mul { a, b }, rg)
    }

    /// `x: [N, ..., C] + v: [N, C]`, broadcasting `v` over the middle dims.
    pub fn add_per_sample(&mut self, x: Var, v: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sx.len() < 2 || sv.len() != 2 || sv[0] != sx[0] || sv[1] != sx[sx.len() - 1] {
            return Err(mismatch("add_per_sample", &sx, &sv));
        }
        let (n, c) = (sv[0], sv[1]);
        let mid = numel(&sx) / (n * c);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = xv.to_vec();
        for i in 0..n {
            let bias = &vv[i * c..(i + 1) * c];
            for s in 0..mid {
                let off = (i * mid + s) * c;
                axpy(&mut out[off..off + c], bias);
            }
        }
        let rg = self.rg(x) || self.rg(v);
        let value = Tensor::new(&sx, out)?;
        self.push("add_per_sample", value, Op::AddPerSample { x, v }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push("scale", v, Op::Scale { x, s }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu_fwd);
        let rg = self.rg(x);
        self.push("gelu", v, Op::Gelu { x }, rg)
    }

    // ----------------------------------------------------------- reductions

    /// Mean squared difference over all elements, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mse", sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total = av.iter().zip(bv).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let v = Tensor::scalar(total / T::lit(av.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        self.push("mse", v, Op::Mse { a, b }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let rg = self.rg(x);
        self.push("mean_all", v, Op::MeanAll { x }, rg)
    }

    /// `[N, S, C] -> [N, C]`, averaging over `S`.
    pub fn mean_mid(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(invalid("mean_mid", format!("expected [N, S, C], got {s:?}")));
        }
        let (n, m, c) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let inv = T::one() / T::lit(m as f64);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..m {
                axpy(dst, &xv[(i * m + j) * c..(i * m + j + 1) * c]);
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.rg(x);
        self.push("mean_mid", Tensor::new(&[n, c], out)?, Op::MeanMid { x }, rg)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(invalid("cross_entropy", format!("logits {s:?} vs {} targets", targets.len())));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid("cross_entropy", format!("target {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (p, &l) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (l - mx).exp();
                z = z + *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            total = total - (row[targets[i]] - mx - z.ln());
        }
        let v = Tensor::scalar(total / T::lit(n as f64));
        let rg = self.rg(logits);
        let probs = if rg && self.grad_enabled { probs } else { Vec::new() };
        self.push("cross_entropy", v, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg)
    }

    // ---------------------------------------------------------- normalizers

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (xv[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / z;
                }
            }
        }
        let rg = self.rg(x);
        self.push("softmax", Tensor::new(&s, out)?, Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(mismatch("layer_norm", &s, self.shape(gain)));
        }
        let rows = numel(&s) / c;
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let inv_c = T::one() / T::lit(c as f64);
        let eps = T::lit(LN_EPS);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (xhat, rstd) = if rg && self.grad_enabled { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push("layer_norm", Tensor::new(&s, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    // -------------------------------------------------------------- shaping

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push("reshape", v, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} invalid for shape {s:?}")));
        }
        let (data, shape) = permute_data(self.value(x).data(), &s, axes);
        let rg = self.rg(x);
        self.push("permute", Tensor::new(&shape, data)?, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", &sa, &sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = numel(&sa) / ca;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_last", Tensor::new(&shape, out)?, Op::ConcatLast { a, b }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[N, H, W, C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample2", format!("expected NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * 4 * h * w * c);
        for i in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let off = ((i * h + y / 2) * w + xx / 2) * c;
                    out.extend_from_slice(&xv[off..off + c]);
                }
            }
        }
        let rg = self.rg(x);
        self.push("upsample2", Tensor::new(&[n, 2 * h, 2 * w, c], out)?, Op::Upsample2 { x }, rg)
    }

    // ----------------------------------------------------------- convolution

    /// 2-D convolution of NHWC `input` with a `[Cout, kh, kw, Cin]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[3] {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (n, h, w, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[1], sk[2]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geo = ConvGeometry { n, h, w, cin, cout, kh, kw, stride, pad: padding, ho, wo };
        let mut out = vec![T::zero(); geo.rows() * cout];
        let cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            im2col(self.value(input).data(), &geo)
        };
        {
            let src: &[T] = if geo.is_pointwise() { self.value(input).data() } else { &cols };
            gemm(geo.rows(), geo.patch(), cout, src, false, self.value(kernel).data(), true, &mut out, false);
        }
        let rg = self.rg(input) || self.rg(kernel);
        let keep_cols = rg && self.grad_enabled && self.rg(kernel) && !geo.is_pointwise();
        let cols = if keep_cols { cols } else { Vec::new() };
        self.push("conv2d", Tensor::new(&[n, ho, wo, cout], out)?, Op::Conv2d { x: input, k: kernel, geo, cols }, rg)
    }

    // -------------------------------------------------------------- backward

    /// Propagates `d loss` back through the tape. Parameter gradients are
    /// accumulated into `store`; gradients of [`Graph::leaf`] inputs are
    /// returned. The graph is consumed: its activations are released and a
    /// second call fails.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<LeafGrads<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let ls = self.shape(loss).to_vec();
        if numel(&ls) != 1 {
            return Err(TensorError::NotScalar(ls));
        }
        self.consumed = true;
        let mut leaf = LeafGrads::default();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&ls, T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, g, &mut grads, store, &mut leaf)?;
        }
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        Ok(leaf)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::new(&shape, data).expect("gradient shape matches value"));
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
        leaf: &mut LeafGrads<T>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {
                leaf.grads.insert(idx, g);
            }
            Op::Param(id) => {
                let p = store.get_mut(*id);
                if p.requires_grad() {
                    p.grad.add_assign(&g);
                }
            }
            &Op::MatMul { a, b, trans_b, batch, m, k, n, shared_rhs } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    if shared_rhs {
                        gemm(batch * m, n, k, gd, false, bv, !trans_b, &mut da, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                    }
                    self.accumulate_data(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); self.value(b).len()];
                    let rows = if shared_rhs { batch * m } else { m };
                    let reps = if shared_rhs { 1 } else { batch };
                    for i in 0..reps {
                        let ga = &gd[i * rows * n..(i + 1) * rows * n];
                        let aa = &av[i * rows * k..(i + 1) * rows * k];
                        let dst = &mut db[i * k * n * (1 - shared_rhs as usize)..][..k * n];
                        if trans_b {
                            gemm(n, rows, k, ga, true, aa, false, dst, false);
                        } else {
                            gemm(k, rows, n, aa, true, ga, false, dst, false);
                        }
                    }
                    self.accumulate_data(grads, b, db);
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                if self.rg(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    let inner = self.value(b).len();
                    let mut db = vec![T::zero(); inner];
                    for row in gd.chunks(inner) {
                        axpy(&mut db, row);
                    }
                    if negate {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate_data(grads, b, db);
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let inner = bv.len();
                if self.rg(a) {
                    let da: Vec<T> = gd.iter().enumerate().map(|(i, &x)| x * bv[i % inner]).collect();
                    self.accumulate_data(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); inner];
                    for (row_g, row_a) in gd.chunks(inner).zip(av.chunks(inner)) {
                        for j in 0..inner {
                            db[j] = db[j] + row_g[j] * row_a[j];
                        }
                    }
                    self.accumulate_data(grads, b, db);
                }
            }
            &Op::AddPerSample { x, v } => {
                if self.rg(x) {
                    self.accumulate(grads, x, g.clone());
                }
                if self.rg(v) {
                    let sv = self.shape(v);
                    let (n, c) = (sv[0], sv[1]);
                    let mid = gd.len() / (n * c);
                    let mut dv = vec![T::zero(); n * c];
                    for i in 0..n {
                        for s in 0..mid {
                            let off = (i * mid + s) * c;
                            axpy(&mut dv[i * c..(i + 1) * c], &gd[off..off + c]);
                        }
                    }
                    self.accumulate_data(grads, v, dv);
                }
            }
            &Op::Scale { x, s } => {
                self.accumulate(grads, x, g.map(|e| e * s));
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                let dx = gd.iter().zip(xv).map(|(&gg, &xx)| gg * gelu_grad(xx)).collect();
                self.accumulate_data(grads, x, dx);
            }
            &Op::Mse { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let coef = gd[0] * T::lit(2.0) / T::lit(av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * coef).collect();
                if self.rg(b) {
                    self.accumulate_data(grads, b, da.iter().map(|&v| -v).collect());
                }
                if self.rg(a) {
                    self.accumulate_data(grads, a, da);
                }
            }
            &Op::MeanAll { x } => {
                let len = self.value(x).len();
                let v = gd[0] / T::lit(len as f64);
                self.accumulate_data(grads, x, vec![v; len]);
            }
            &Op::MeanMid { x } => {
                let s = self.shape(x);
                let (n, m, c) = (s[0], s[1], s[2]);
                let inv = T::one() / T::lit(m as f64);
                let mut dx = vec![T::zero(); n * m * c];
                for i in 0..n {
                    for j in 0..m {
                        for ch in 0..c {
                            dx[(i * m + j) * c + ch] = gd[i * c + ch] * inv;
                        }
                    }
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len();
                let coef = gd[0] / T::lit(n as f64);
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] = dx[i * k + t] - T::one();
                }
                dx.iter_mut().for_each(|v| *v = *v * coef);
                self.accumulate_data(grads, *logits, dx);
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot = dot + gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let rows = gd.len() / c;
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] = dg[j] + gd[r * c + j] * xhat[r * c + j];
                            db[j] = db[j] + gd[r * c + j];
                        }
                    }
                    self.accumulate_data(grads, *gain, dg);
                    self.accumulate_data(grads, *bias, db);
                }
                if self.rg(*x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gd[r * c + j] * gv[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * c + j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dx = mean_dx * inv_c;
                        for j in 0..c {
                            let d = gd[r * c + j] * gv[j];
                            dx[r * c + j] = rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                    self.accumulate_data(grads, *x, dx);
                }
            }
            &Op::Reshape { x } => {
                self.accumulate_data(grads, x, g.into_data());
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (dx, _) = permute_data(gd, node.value.shape(), &inverse);
                self.accumulate_data(grads, *x, dx);
            }
            &Op::ConcatLast { a, b } => {
                let ca = *self.shape(a).last().expect("rank >= 1");
                let cb = *self.shape(b).last().expect("rank >= 1");
                let rows = gd.len() / (ca + cb);
                if self.rg(a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        da.extend_from_slice(&gd[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accumulate_data(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        db.extend_from_slice(&gd[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accumulate_data(grads, b, db);
                }
            }
            &Op::Upsample2 { x } => {
                let s = self.shape(x);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); n * h * w * c];
                for i in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let src = ((i * 2 * h + y) * 2 * w + xx) * c;
                            let dst = ((i * h + y / 2) * w + xx / 2) * c;
                            axpy(&mut dx[dst..dst + c], &gd[src..src + c]);
                        }
                    }
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::Conv2d { x, k, geo, cols } => {
                let geo = *geo;
                if self.rg(*k) {
                    let src: &[T] = if geo.is_pointwise() { self.value(*x).data() } else { cols };
                    let mut dk = vec![T::zero(); geo.cout * geo.patch()];
                    gemm(geo.cout, geo.rows(), geo.patch(), gd, true, src, false, &mut dk, false);
                    self.accumulate_data(grads, *k, dk);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); geo.rows() * geo.patch()];
                    gemm(geo.rows(), geo.cout, geo.patch(), gd, false, self.value(*k).data(), false, &mut dcols, false);
                    let dx = if geo.is_pointwise() { dcols } else { col2im(&dcols, &geo) };
                    self.accumulate_data(grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + fast_tanh(u))
}

/// `tanh` through a single `exp`; saturates cleanly for large `|u|`.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    let th = fast_tanh(u);
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        axpy(&mut x[dst..dst + g.cin], &cols[src..src + g.cin]);
                    }
                }
            }
        }
    }
    x
}

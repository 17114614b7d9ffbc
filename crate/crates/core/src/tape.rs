//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order. Each recorded
//! node keeps its forward value plus whatever the backward rule needs.
//! [`Tape::backward`] walks the nodes in reverse, so every node is visited
//! once after all of its consumers.

use crate::error::TensorError;
use crate::rng::RngStream;
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::{rows_cols, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: S },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Act { a: Var, kind: Activation, deriv: Vec<S> },
    Dropout { a: Var, keep: Vec<S> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<S> },
    Sum { a: Var },
    Sse { pred: Var, target: Vec<S>, weights: Vec<S> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Slice { a: Var, outer: usize, axis_len: usize, start: usize, len: usize, inner: usize },
    Expand { a: Var },
    MaskRows { a: Var, fill: Var, mask: Vec<bool>, width: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if `v` requires gradients and
    /// is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::lit(3.0) * a * x * x);
    (y, dy)
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients are only produced for leaves with
    /// `requires_grad` and for nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (name, f): (&'static str, fn(S, S) -> S) = match kind {
            BinaryKind::Add => ("add", |x, y| x + y),
            BinaryKind::Sub => ("sub", |x, y| x - y),
            BinaryKind::Mul => ("mul", |x, y| x * y),
        };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let broadcast_ok = bv.len() == 1
            || (bv.rank() <= av.rank() && av.shape()[av.rank() - bv.rank()..] == *bv.shape());
        if !broadcast_ok || bv.is_empty() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let period = bv.len();
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % period])).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, out, Op::Binary { kind, a, b }, &[a, b])
    }

    /// `a + b`; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add_scalar", out, Op::AddScalar { a }, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mul_scalar", out, Op::MulScalar { a, c }, &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var, TensorError> {
        let grad = self.nodes[a.0].needs_grad;
        let av = &self.nodes[a.0].value;
        let (data, deriv) = match kind {
            Activation::Gelu if grad => av.data().iter().map(|&x| gelu_parts(x)).unzip(),
            Activation::Gelu => (av.data().iter().map(|&x| gelu_parts(x).0).collect(), Vec::new()),
            Activation::Relu => (av.data().iter().map(|&x| x.max(S::zero())).collect(), Vec::new()),
        };
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("activation", out, Op::Act { a, kind, deriv }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.activation(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.activation(a, Activation::Relu)
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `a` itself.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let scale = S::lit(1.0 / (1.0 - rate));
        let av = &self.nodes[a.0].value;
        let keep: Vec<S> = (0..av.len()).map(|_| if rng.uniform() < rate { S::zero() } else { scale }).collect();
        let data = av.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { a, keep }, &[a])
    }

    // ----- linear algebra ----------------------------------------------

    /// Matrix product. `a` is `[..., m, k]`; `b` is either `[k, n]` (shared
    /// across the batch) or `[..., k, n]` with the same leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
        let (k2, n) = (bv.shape()[bv.rank() - 2], bv.shape()[bv.rank() - 1]);
        let lead = &av.shape()[..av.rank() - 2];
        let shared_rhs = bv.rank() == 2;
        if k != k2 || (!shared_rhs && bv.shape()[..bv.rank() - 2] != *lead) {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        if shared_rhs {
            gemm(
                MatRef::row_major(av.data(), 0, batch * m, k),
                MatRef::row_major(bv.data(), 0, k, n),
                S::zero(),
                MatMut::row_major(&mut out, 0, batch * m, n),
            );
        } else {
            for bi in 0..batch {
                gemm(
                    MatRef::row_major(av.data(), bi * m * k, m, k),
                    MatRef::row_major(bv.data(), bi * k * n, k, n),
                    S::zero(),
                    MatMut::row_major(&mut out, bi * m * n, m, n),
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_parts(shape, out);
        self.push("matmul", value, Op::MatMul { a, b, batch, m, k, n, shared_rhs }, &[a, b])
    }

    /// `x · wᵀ + b` with `x: [..., in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[1] {
            return Err(shape_err("linear", xv.shape(), wv.shape()));
        }
        let (out_dim, inp) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [out_dim] {
                return Err(shape_err("linear bias", bs, &[out_dim]));
            }
        }
        let (rows, _) = rows_cols(xv.shape());
        let mut out = vec![S::zero(); rows * out_dim];
        gemm(
            MatRef::row_major(xv.data(), 0, rows, inp),
            MatRef::row_major(wv.data(), 0, out_dim, inp).t(),
            S::zero(),
            MatMut::row_major(&mut out, 0, rows, out_dim),
        );
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            for row in out.chunks_exact_mut(out_dim) {
                add_into(row, bd);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b, rows, inp, out: out_dim }, &inputs)
    }

    // ----- normalization -----------------------------------------------

    /// Softmax over the last dimension, with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (_, cols) = rows_cols(av.shape());
        if cols == 0 {
            return Err(TensorError::Invalid("softmax over an empty last dimension".into()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            softmax_row(row);
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("softmax", out, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last dimension with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = rows_cols(xv.shape());
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        if gv.len() != cols || bv.len() != cols {
            return Err(shape_err("layer_norm", xv.shape(), &[gv.len()]));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm eps must be positive".into()));
        }
        let eps = S::lit(eps);
        let inv_n = S::one() / S::lit(cols as f64);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    // ----- attention ---------------------------------------------------

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q`, `k`, `v` are `[batch, seq, d]` with `d` divisible by `heads`.
    /// `key_exclude[b * seq + j] == true` removes key `j` for every query of
    /// batch element `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_exclude: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        if qv.rank() != 3 || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        let (batch, seq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(mask) = key_exclude {
            if mask.len() != batch * seq {
                return Err(shape_err("attention mask", &[mask.len()], &[batch, seq]));
            }
            for b in 0..batch {
                if seq > 0 && mask[b * seq..(b + 1) * seq].iter().all(|&m| m) {
                    return Err(TensorError::Invalid(format!("attention mask excludes every key in batch {b}")));
                }
            }
        }
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let head = |data| MatRef { data, offset: off, rows: seq, cols: dh, rs: d, cs: 1 };
                gemm(
                    head(qv.data()),
                    head(kv.data()).t(),
                    S::zero(),
                    MatMut::row_major(&mut probs, p_off, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut probs[p_off + i * seq..p_off + (i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        let excluded = key_exclude.is_some_and(|m| m[b * seq + j]);
                        *s = if excluded { S::neg_infinity() } else { *s * scale };
                    }
                    softmax_row(row);
                }
                gemm(
                    MatRef::row_major(&probs, p_off, seq, seq),
                    head(vv.data()),
                    S::zero(),
                    MatMut { data: &mut out, offset: off, rows: seq, cols: dh, rs: d, cs: 1 },
                );
            }
        }
        let value = Tensor::from_parts(vec![batch, seq, d], out);
        self.push("attention", value, Op::Attention { q, k, v, batch, seq, heads, probs }, &[q, k, v])
    }

    /// Attention weights recorded by an attention node: `[batch, heads, seq, seq]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[S]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ----- reductions and losses ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.nodes[a.0].value.data().iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Weighted sum of squared errors `Σ w·(pred − target)²` as a scalar.
    pub fn sse(&mut self, pred: Var, target: &Tensor<S>, weights: &[S]) -> Result<Var, TensorError> {
        let pv = &self.nodes[pred.0].value;
        if pv.shape() != target.shape() || weights.len() != pv.len() {
            return Err(shape_err("sse", pv.shape(), target.shape()));
        }
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(weights)
            .map(|((&p, &t), &w)| w * (p - t) * (p - t))
            .sum::<S>();
        let op = Op::Sse { pred, target: target.data().to_vec(), weights: weights.to_vec() };
        self.push("sse", Tensor::scalar(s), op, &[pred])
    }

    /// Mean squared error over positions with nonzero weight.
    ///
    /// `weights` is either absent (all positions count) or one weight per
    /// element of `pred`.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>, weights: Option<&[S]>) -> Result<Var, TensorError> {
        let n = self.nodes[pred.0].value.len();
        let ones;
        let w = match weights {
            Some(w) => w,
            None => {
                ones = vec![S::one(); n];
                &ones
            }
        };
        let total = w.iter().copied().sum::<S>();
        if total <= S::zero() {
            return Err(TensorError::Invalid("mse with an empty mask".into()));
        }
        let sse = self.sse(pred, target, w)?;
        self.mul_scalar(sse, S::one() / total)
    }

    // ----- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[a.0].value.clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let src = self.nodes[p.0].value.data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), sizes, outer, inner }, parts)
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        self.push("slice", value, Op::Slice { a, outer, axis_len, start, len, inner }, &[a])
    }

    /// Repeat `a` along a new leading dimension of size `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(av.len() * n);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(av.shape());
        let value = Tensor::from_parts(shape, data);
        self.push("expand", value, Op::Expand { a }, &[a])
    }

    /// Replace every row `r` of `a` (viewed as `[rows, width]`) with `fill`
    /// wherever `mask[r]` is set.
    pub fn mask_rows(&mut self, a: Var, fill: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let fv = &self.nodes[fill.0].value;
        let (rows, width) = rows_cols(av.shape());
        if fv.len() != width || mask.len() != rows {
            return Err(shape_err("mask_rows", av.shape(), fv.shape()));
        }
        let mut data = av.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * width..(r + 1) * width].copy_from_slice(fv.data());
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mask_rows", value, Op::MaskRows { a, fill, mask: mask.to_vec(), width }, &[a, fill])
    }

    // ----- backward ----------------------------------------------------

    /// Populate gradients of the scalar `loss` with respect to every node
    /// that requires them. Gradients accumulate across reuse of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::Invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                if n.needs_grad {
                    g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Accumulator for input `v`, created zeroed on first use.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let period = self.nodes[b.0].value.len();
                if wants(a) {
                    let ga = acc!(a);
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => add_into(ga, g),
                        BinaryKind::Mul => {
                            let bd = val(b);
                            for (idx, (d, &gi)) in ga.iter_mut().zip(g).enumerate() {
                                *d += gi * bd[idx % period];
                            }
                        }
                    }
                }
                if wants(b) {
                    let ad = val(a);
                    let gb = acc!(b);
                    for (idx, &gi) in g.iter().enumerate() {
                        let contrib = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[idx],
                        };
                        gb[idx % period] += contrib;
                    }
                }
            }
            Op::AddScalar { a } => add_into(acc!(*a), g),
            Op::MulScalar { a, c } => {
                for (d, &gi) in acc!(*a).iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                if wants(a) {
                    let bd = val(b);
                    let ga = acc!(a);
                    for bi in 0..batch {
                        let b_off = if *shared_rhs { 0 } else { bi * k * n };
                        gemm(
                            MatRef::row_major(g, bi * m * n, m, n),
                            MatRef::row_major(bd, b_off, k, n).t(),
                            S::one(),
                            MatMut::row_major(ga, bi * m * k, m, k),
                        );
                    }
                }
                if wants(b) {
                    let ad = val(a);
                    let gb = acc!(b);
                    if *shared_rhs {
                        gemm(
                            MatRef::row_major(ad, 0, batch * m, k).t(),
                            MatRef::row_major(g, 0, batch * m, n),
                            S::one(),
                            MatMut::row_major(gb, 0, k, n),
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                MatRef::row_major(ad, bi * m * k, m, k).t(),
                                MatRef::row_major(g, bi * m * n, m, n),
                                S::one(),
                                MatMut::row_major(gb, bi * k * n, k, n),
                            );
                        }
                    }
                }
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (x, w, rows, inp, out) = (*x, *w, *rows, *inp, *out);
                if wants(x) {
                    let wd = val(w);
                    gemm(
                        MatRef::row_major(g, 0, rows, out),
                        MatRef::row_major(wd, 0, out, inp),
                        S::one(),
                        MatMut::row_major(acc!(x), 0, rows, inp),
                    );
                }
                if wants(w) {
                    let xd = val(x);
                    gemm(
                        MatRef::row_major(g, 0, rows, out).t(),
                        MatRef::row_major(xd, 0, rows, inp),
                        S::one(),
                        MatMut::row_major(acc!(w), 0, out, inp),
                    );
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = acc!(*b);
                        for row in g.chunks_exact(out) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let ga = acc!(*a);
                for ((yr, gr), dr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(ga.chunks_exact_mut(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum::<S>();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = node.value.last_dim();
                let gv = val(*gain);
                if wants(*x) {
                    let inv_n = S::one() / S::lit(cols as f64);
                    let gx = acc!(*x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            gx[r * cols + c] += rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = acc!(*gain);
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc!(*bias);
                    for gr in g.chunks_exact(cols) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Act { a, kind, deriv } => {
                let xd = val(*a);
                let ga = acc!(*a);
                match kind {
                    Activation::Gelu => {
                        for ((d, &dy), &gi) in ga.iter_mut().zip(deriv).zip(g) {
                            *d += gi * dy;
                        }
                    }
                    Activation::Relu => {
                        for ((d, &x), &gi) in ga.iter_mut().zip(xd).zip(g) {
                            if x > S::zero() {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                for ((d, &k), &gi) in acc!(*a).iter_mut().zip(keep).zip(g) {
                    *d += gi * k;
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, grads, (*q, *k, *v), (*batch, *seq, *heads), probs);
            }
            Op::Sum { a } => {
                let g0 = g[0];
                for d in acc!(*a).iter_mut() {
                    *d += g0;
                }
            }
            Op::Sse { pred, target, weights } => {
                let two_g = S::lit(2.0) * g[0];
                let pd = val(*pred);
                let gp = acc!(*pred);
                for (idx, d) in gp.iter_mut().enumerate() {
                    *d += two_g * weights[idx] * (pd[idx] - target[idx]);
                }
            }
            Op::Reshape { a } => add_into(acc!(*a), g),
            Op::Concat { parts, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (p, &sz) in parts.iter().zip(sizes) {
                    if wants(*p) {
                        let gp = acc!(*p);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            add_into(&mut gp[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    }
                    offset += sz;
                }
            }
            Op::Slice { a, outer, axis_len, start, len, inner } => {
                let ga = acc!(*a);
                for o in 0..*outer {
                    let base = (o * axis_len + start) * inner;
                    add_into(&mut ga[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Expand { a } => {
                let n = self.nodes[a.0].value.len();
                let ga = acc!(*a);
                for chunk in g.chunks_exact(n) {
                    add_into(ga, chunk);
                }
            }
            Op::MaskRows { a, fill, mask, width } => {
                let width = *width;
                if wants(*a) {
                    let ga = acc!(*a);
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut ga[r * width..(r + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    }
                }
                if wants(*fill) {
                    let gf = acc!(*fill);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(gf, &g[r * width..(r + 1) * width]);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[S],
    ) {
        let d = self.nodes[q.0].value.last_dim();
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.nodes[q.0].value.data(), self.nodes[k.0].value.data(), self.nodes[v.0].value.data());
        let n = batch * seq * d;
        let mut gq = vec![S::zero(); n];
        let mut gk = vec![S::zero(); n];
        let mut gv = vec![S::zero(); n];
        let mut dp = vec![S::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let head = |data| MatRef { data, offset: off, rows: seq, cols: dh, rs: d, cs: 1 };
                let head_mut = |data| MatMut { data, offset: off, rows: seq, cols: dh, rs: d, cs: 1 };
                let p = MatRef::row_major(probs, p_off, seq, seq);
                gemm(p.t(), head(g), S::one(), head_mut(&mut gv));
                gemm(head(g), head(vd).t(), S::zero(), MatMut::row_major(&mut dp, 0, seq, seq));
                for i in 0..seq {
                    let pr = &probs[p_off + i * seq..p_off + (i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot = pr.iter().zip(dr.iter()).map(|(&pi, &di)| pi * di).sum::<S>();
                    for (dv, &pi) in dr.iter_mut().zip(pr) {
                        *dv = pi * (*dv - dot) * scale;
                    }
                }
                let ds = MatRef::row_major(&dp, 0, seq, seq);
                gemm(ds, head(kd), S::one(), head_mut(&mut gq));
                gemm(ds.t(), head(qd), S::one(), head_mut(&mut gk));
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                match &mut grads[var.0] {
                    Some(existing) => add_into(existing, &local),
                    slot @ None => *slot = Some(local),
                }
            }
        }
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = if *x == S::neg_infinity() { S::zero() } else { (*x - max).exp() };
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

//! Single-use reverse-mode tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the vector-Jacobian product. `backward` walks the tape once in reverse
//! and marks the graph consumed.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{softmax_in_place, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm_strided, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Work counters collected while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates spent forming attention score matrices (`QK^T`).
    pub attention_score_macs: u64,
    /// Token positions pushed through transformer stacks.
    pub token_positions: u64,
    /// Number of transformer stack invocations.
    pub transformer_calls: u64,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, rhs: Self) {
        self.attention_score_macs += rhs.attention_score_macs;
        self.token_positions += rhs.token_positions;
        self.transformer_calls += rhs.transformer_calls;
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, fan_in: usize, fan_out: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    AddScalar { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Clamp { a: usize, lo: T, hi: T },
    LayerNorm { x: usize, gamma: usize, beta: usize, dim: usize, mean: Vec<T>, rstd: Vec<T> },
    Softmax { a: usize, dim: usize },
    Attention { q: usize, k: usize, v: usize, batch: usize, len: usize, heads: usize, head_dim: usize, probs: Vec<T> },
    GatherRows { src: usize, idx: Vec<usize>, dim: usize },
    ConcatRows { parts: Vec<usize> },
    Reshape { a: usize },
    Dropout { a: usize, mask: Vec<T> },
    Sum { a: usize },
    Mean { a: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T>, classes: usize },
    Mse { pred: usize, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph. Build one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    grad_enabled: bool,
    consumed: bool,
    rng: ChaCha8Rng,
    counters: Counters,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&i| self.grads[i].as_deref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Graph<T> {
    /// `train` enables dropout; the seed drives dropout masks and sampling noise.
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train,
            grad_enabled: true,
            consumed: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: Counters::default(),
        }
    }

    /// Evaluation graph that records no backward information.
    pub fn inference() -> Self {
        let mut g = Self::new(false, 0);
        g.grad_enabled = false;
        g
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub(crate) fn counters_mut(&mut self) -> &mut Counters {
        &mut self.counters
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
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

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input; it is differentiable when `tensor.requires_grad` is set.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.input(tensor)
    }

    /// Loads a parameter; repeated loads return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Param, requires_grad: self.grad_enabled });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared)
    /// or carries the same leading batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::ShapeMismatch(format!("matmul needs rank >= 2, got {sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul inner dims {sa:?} @ {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::ShapeMismatch(format!("matmul batch dims {sa:?} @ {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a.0), self.data(b.0));
            for bi in 0..batch {
                let boff = if b_shared { 0 } else { bi * k * n };
                gemm_strided(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[bi * m * k..],
                    (k as isize, 1),
                    &bd[boff..],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, batch, m, k, n, b_shared }, &[a.0, b.0]))
    }

    /// `x @ w + b` over the last dim of `x`; `w` is `[fan_in, fan_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::ShapeMismatch(format!("linear {sx:?} @ {sw:?}")));
        }
        let (fan_in, fan_out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.value(b).numel() != fan_out {
                return Err(Error::ShapeMismatch(format!("bias {:?} for fan_out {fan_out}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bd = self.data(b.0);
            for r in out.chunks_exact_mut(fan_out) {
                r.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm_strided(
            rows,
            fan_in,
            fan_out,
            T::one(),
            self.data(x.0),
            (fan_in as isize, 1),
            self.data(w.0),
            (fan_out as isize, 1),
            beta,
            &mut out,
            (fan_out as isize, 1),
        );
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(fan_out);
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0), rows, fan_in, fan_out }, &inputs))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !suffix_broadcast(sa, sb) {
            return Err(Error::ShapeMismatch(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.data(b.0);
        let mut out = Vec::with_capacity(self.value(a).numel());
        for chunk in self.data(a.0).chunks_exact(bd.len()) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(&sa.to_vec(), out)
    }

    /// Elementwise sum; `b` may broadcast over leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor { shape: t.shape().to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.unary(a, |x| x * s);
        self.push(v, Op::Scale { a: a.0, s }, &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.unary(a, |x| x + s);
        self.push(v, Op::AddScalar { a: a.0 }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu { a: a.0 }, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, T::exp);
        self.push(v, Op::Exp { a: a.0 }, &[a.0])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.unary(a, |x| x.max(lo).min(hi));
        self.push(v, Op::Clamp { a: a.0, lo, hi }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Per-row layer normalization over the last dim with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let dim = t.last_dim();
        if self.value(gamma).numel() != dim || self.value(beta).numel() != dim {
            return Err(Error::ShapeMismatch(format!("layer_norm affine params for dim {dim}")));
        }
        let eps = T::from_f64_lossy(eps);
        let rows = t.rows();
        let inv_dim = T::from_usize(dim).unwrap().recip();
        let mut out = vec![T::zero(); t.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let (g, b) = (self.data(gamma.0), self.data(beta.0));
        for (r, (xr, orow)) in t.data().chunks_exact(dim).zip(out.chunks_exact_mut(dim)).enumerate() {
            let mu = xr.iter().copied().sum::<T>() * inv_dim;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_dim;
            let rs = (var + eps).sqrt().recip();
            for j in 0..dim {
                orow[j] = (xr[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
            debug_assert_eq!(mean.len(), r + 1);
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, dim, mean, rstd }, &[x.0, gamma.0, beta.0]))
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::NonFinite);
        }
        let dim = t.last_dim();
        let mut v = t.clone();
        for row in v.data_mut().chunks_exact_mut(dim) {
            softmax_in_place(row);
        }
        Ok(self.push(v, Op::Softmax { a: a.0, dim }, &[a.0]))
    }

    /// Fused multi-head causal attention.
    ///
    /// `q`, `k`, `v` are `[batch * len, heads * head_dim]` with head `h` in
    /// columns `h*head_dim..(h+1)*head_dim`. Position `i` attends to `j <= i`
    /// with scores scaled by `1/sqrt(head_dim)`.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let width = heads * head_dim;
        for x in [q, k, v] {
            if self.value(x).numel() != batch * len * width {
                return Err(Error::ShapeMismatch(format!(
                    "attention operand {:?} for batch {batch} len {len} width {width}",
                    self.shape(x)
                )));
            }
        }
        let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
        let keep_probs = self.grad_enabled && (self.rg(q.0) || self.rg(k.0) || self.rg(v.0));
        let mut probs = if keep_probs { vec![T::zero(); batch * heads * len * len] } else { Vec::new() };
        let mut scores = vec![T::zero(); len * len];
        let mut out = vec![T::zero(); batch * len * width];
        let rs = width as isize;
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * len * width + h * head_dim;
                gemm_strided(len, head_dim, len, scale, &qd[off..], (rs, 1), &kd[off..], (1, rs), T::zero(), &mut scores, (len as isize, 1));
                for i in 0..len {
                    let row = &mut scores[i * len..(i + 1) * len];
                    softmax_in_place(&mut row[..=i]);
                    for x in &mut row[i + 1..] {
                        *x = T::zero();
                    }
                }
                gemm_strided(len, len, head_dim, T::one(), &scores, (len as isize, 1), &vd[off..], (rs, 1), T::zero(), &mut out[off..], (rs, 1));
                if keep_probs {
                    let p = (b * heads + h) * len * len;
                    probs[p..p + len * len].copy_from_slice(&scores);
                }
            }
        }
        self.counters.attention_score_macs += (batch * heads * len * len * head_dim) as u64;
        let value = Tensor::new(&[batch * len, width], out)?;
        Ok(self.push(value, Op::Attention { q: q.0, k: k.0, v: v.0, batch, len, heads, head_dim, probs }, &[q.0, k.0, v.0]))
    }

    /// Rows of `src` (viewed as `[rows, last_dim]`) selected by `idx`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let dim = t.last_dim();
        let rows = t.rows();
        if idx.is_empty() {
            return Err(Error::ShapeMismatch("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &r in idx {
            if r >= rows {
                return Err(Error::ShapeMismatch(format!("row {r} out of range for {rows} rows")));
            }
            out.extend_from_slice(&t.data()[r * dim..(r + 1) * dim]);
        }
        let value = Tensor::new(&[idx.len(), dim], out)?;
        Ok(self.push(value, Op::GatherRows { src: src.0, idx: idx.to_vec(), dim }, &[src.0]))
    }

    /// Stacks inputs (each viewed as `[rows, dim]`) along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        };
        let dim = self.value(*first).last_dim();
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.last_dim() != dim {
                return Err(Error::ShapeMismatch(format!("concat dims {dim} vs {}", t.last_dim())));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / dim;
        let value = Tensor::new(&[rows, dim], out)?;
        let inputs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatRows { parts: inputs.clone() }, &inputs))
    }

    /// Inverted dropout in train mode; identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = T::from_f64_lossy(1.0 / keep);
        let n = self.value(a).numel();
        let threshold = (keep * 4_294_967_296.0) as u64;
        let mask: Vec<T> = (0..n).map(|_| if u64::from(self.rng.next_u32()) < threshold { scale } else { T::zero() }).collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor { shape: t.shape().to_vec(), data, requires_grad: false, grad: None };
        self.push(value, Op::Dropout { a: a.0, mask }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a.0).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a.0);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let classes = t.last_dim();
        if t.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} logit rows vs {} labels", t.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ShapeMismatch(format!("label {bad} out of range for {classes} classes")));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite);
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_exact_mut(classes).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(T::min_positive_value()).ln();
        }
        loss /= T::from_usize(labels.len()).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs, classes }, &[logits.0]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.data(pred.0);
        if p.len() != target.len() {
            return Err(Error::ShapeMismatch(format!("mse of {} vs {} values", p.len(), target.len())));
        }
        let s = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / T::from_usize(p.len()).unwrap();
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred: pred.0, target: target.to_vec() }, &[pred.0]))
    }

    /// Reparameterized Gaussian draw `mu + exp(log_sigma) * eps`.
    ///
    /// `eps` is drawn from the graph RNG unless supplied; it is returned so
    /// callers can record it.
    pub fn gaussian_sample(&mut self, mu: Var, log_sigma: Var, eps: Option<Tensor<T>>) -> Result<(Var, Tensor<T>)> {
        let shape = self.shape(mu).to_vec();
        if self.shape(log_sigma) != shape.as_slice() {
            return Err(Error::ShapeMismatch("mu and log_sigma shapes differ".into()));
        }
        let eps = match eps {
            Some(e) if e.shape() == shape.as_slice() => e,
            Some(e) => return Err(Error::ShapeMismatch(format!("noise {:?} for {shape:?}", e.shape()))),
            None => Tensor::randn(&shape, 1.0, &mut self.rng),
        };
        let sigma = self.exp(log_sigma);
        let e = self.constant(eps.clone());
        let spread = self.mul(sigma, e)?;
        let z = self.add(mu, spread)?;
        Ok((z, eps))
    }

    /// Reverse pass from a scalar. The graph cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.grad_enabled {
            return Err(Error::InvalidConfig("backward on an inference graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(g) = self.backprop_in_place(i, g, &mut grads) {
                self.backprop_node(i, &g, &mut grads);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        let params = self.param_vars.iter().map(|(&id, v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    /// Elementwise ops whose input has no gradient yet reuse the output
    /// gradient buffer. Returns the buffer when the general path is needed.
    fn backprop_in_place(&self, i: usize, mut g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Option<Vec<T>> {
        let out = self.nodes[i].value.data();
        let a = match &self.nodes[i].op {
            &Op::Relu { a } | &Op::Exp { a } | &Op::Scale { a, .. } | &Op::AddScalar { a } | &Op::Reshape { a } | &Op::Dropout { a, .. } => a,
            &Op::Add { a, b } | &Op::Sub { a, b } if !self.rg(b) => a,
            _ => return Some(g),
        };
        if grads[a].is_some() || !self.rg(a) {
            return Some(g);
        }
        match &self.nodes[i].op {
            Op::Relu { .. } => {
                for (v, o) in g.iter_mut().zip(out) {
                    if *o <= T::zero() {
                        *v = T::zero();
                    }
                }
            }
            Op::Exp { .. } => {
                for (v, o) in g.iter_mut().zip(out) {
                    *v *= *o;
                }
            }
            &Op::Scale { s, .. } => {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
            Op::Dropout { mask, .. } => {
                for (v, m) in g.iter_mut().zip(mask) {
                    *v *= *m;
                }
            }
            _ => {}
        }
        grads[a] = Some(g);
        None
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let zeros = |j: usize| vec![T::zero(); nodes[j].value.numel()];
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                if grads[j].is_none() {
                    grads[j] = Some(zeros(j));
                }
                grads[j].as_mut().unwrap().as_mut_slice()
            }};
        }
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, batch, m, k, n, b_shared } => {
                if self.rg(a) {
                    let bd = self.data(b);
                    let ga = acc!(a);
                    for bi in 0..batch {
                        let boff = if b_shared { 0 } else { bi * k * n };
                        // dA = dC @ B^T
                        gemm_strided(m, n, k, T::one(), &g[bi * m * n..], (n as isize, 1), &bd[boff..], (1, n as isize), T::one(), &mut ga[bi * m * k..], (k as isize, 1));
                    }
                }
                if self.rg(b) {
                    let ad = self.data(a);
                    let gb = acc!(b);
                    for bi in 0..batch {
                        let boff = if b_shared { 0 } else { bi * k * n };
                        // dB = A^T @ dC
                        gemm_strided(k, m, n, T::one(), &ad[bi * m * k..], (1, k as isize), &g[bi * m * n..], (n as isize, 1), T::one(), &mut gb[boff..], (n as isize, 1));
                    }
                }
            }
            &Op::Linear { x, w, b, rows, fan_in, fan_out } => {
                if self.rg(x) {
                    let wd = self.data(w);
                    let gx = acc!(x);
                    gemm_strided(rows, fan_out, fan_in, T::one(), g, (fan_out as isize, 1), wd, (1, fan_out as isize), T::one(), gx, (fan_in as isize, 1));
                }
                if self.rg(w) {
                    let xd = self.data(x);
                    let gw = acc!(w);
                    gemm_strided(fan_in, rows, fan_out, T::one(), xd, (1, fan_in as isize), g, (fan_out as isize, 1), T::one(), gw, (fan_out as isize, 1));
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        let gb = acc!(b);
                        for row in g.chunks_exact(fan_out) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += *v;
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.rg(a) {
                    for (s, v) in acc!(a).iter_mut().zip(g) {
                        *s += *v;
                    }
                }
                if self.rg(b) {
                    let gb = acc!(b);
                    let blen = gb.len();
                    for chunk in g.chunks_exact(blen) {
                        for (d, v) in gb.iter_mut().zip(chunk) {
                            *d += sign * *v;
                        }
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let blen = bd.len();
                if self.rg(a) {
                    for (ga, gc) in acc!(a).chunks_exact_mut(blen).zip(g.chunks_exact(blen)) {
                        for ((d, v), y) in ga.iter_mut().zip(gc).zip(bd) {
                            *d += *v * *y;
                        }
                    }
                }
                if self.rg(b) {
                    let gb = acc!(b);
                    for (gc, ac) in g.chunks_exact(blen).zip(ad.chunks_exact(blen)) {
                        for ((d, v), x) in gb.iter_mut().zip(gc).zip(ac) {
                            *d += *v * *x;
                        }
                    }
                }
            }
            &Op::Scale { a, s } => {
                for (d, v) in acc!(a).iter_mut().zip(g) {
                    *d += *v * s;
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                for (d, v) in acc!(a).iter_mut().zip(g) {
                    *d += *v;
                }
            }
            &Op::Relu { a } => {
                for ((d, v), o) in acc!(a).iter_mut().zip(g).zip(out) {
                    if *o > T::zero() {
                        *d += *v;
                    }
                }
            }
            &Op::Exp { a } => {
                for ((d, v), o) in acc!(a).iter_mut().zip(g).zip(out) {
                    *d += *v * *o;
                }
            }
            &Op::Clamp { a, lo, hi } => {
                let ad = self.data(a);
                for ((d, v), x) in acc!(a).iter_mut().zip(g).zip(ad) {
                    if *x >= lo && *x <= hi {
                        *d += *v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, dim, mean, rstd } => {
                let (x, gamma, beta, dim) = (*x, *gamma, *beta, *dim);
                let xd = self.data(x);
                let gd = self.data(gamma);
                let inv_dim = T::from_usize(dim).unwrap().recip();
                if self.rg(gamma) || self.rg(beta) {
                    let mut ggam = vec![T::zero(); dim];
                    let mut gbet = vec![T::zero(); dim];
                    for (r, (xr, gr)) in xd.chunks_exact(dim).zip(g.chunks_exact(dim)).enumerate() {
                        for j in 0..dim {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            ggam[j] += gr[j] * xhat;
                            gbet[j] += gr[j];
                        }
                    }
                    if self.rg(gamma) {
                        for (d, v) in acc!(gamma).iter_mut().zip(&ggam) {
                            *d += *v;
                        }
                    }
                    if self.rg(beta) {
                        for (d, v) in acc!(beta).iter_mut().zip(&gbet) {
                            *d += *v;
                        }
                    }
                }
                if self.rg(x) {
                    let gx = acc!(x);
                    let mut dxhat = vec![T::zero(); dim];
                    for (r, ((xr, gr), gxr)) in xd.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(gx.chunks_exact_mut(dim)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gd[j];
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat;
                        }
                        m1 *= inv_dim;
                        m2 *= inv_dim;
                        for j in 0..dim {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            gxr[j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            &Op::Softmax { a, dim } => {
                let ga = acc!(a);
                for ((gr, yr), dr) in g.chunks_exact(dim).zip(out.chunks_exact(dim)).zip(ga.chunks_exact_mut(dim)) {
                    let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                    for j in 0..dim {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Attention { q, k, v, batch, len, heads, head_dim, probs } => {
                let (q, k, v, batch, len, heads, head_dim) = (*q, *k, *v, *batch, *len, *heads, *head_dim);
                let width = heads * head_dim;
                let rs = width as isize;
                let ls = len as isize;
                let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
                let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
                let mut gq = zeros(q);
                let mut gk = zeros(k);
                let mut gv = zeros(v);
                let mut dp = vec![T::zero(); len * len];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * len * width + h * head_dim;
                        let p = &probs[(b * heads + h) * len * len..(b * heads + h + 1) * len * len];
                        // dP = dO @ V^T
                        gemm_strided(len, head_dim, len, T::one(), &g[off..], (rs, 1), &vd[off..], (1, rs), T::zero(), &mut dp, (ls, 1));
                        // dV += P^T @ dO
                        gemm_strided(len, len, head_dim, T::one(), p, (1, ls), &g[off..], (rs, 1), T::one(), &mut gv[off..], (rs, 1));
                        for i in 0..len {
                            let pr = &p[i * len..i * len + i + 1];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                            for x in &mut dr[i + 1..] {
                                *x = T::zero();
                            }
                        }
                        // dQ += scale * dS @ K ; dK += scale * dS^T @ Q
                        gemm_strided(len, len, head_dim, scale, &dp, (ls, 1), &kd[off..], (rs, 1), T::one(), &mut gq[off..], (rs, 1));
                        gemm_strided(len, len, head_dim, scale, &dp, (1, ls), &qd[off..], (rs, 1), T::one(), &mut gk[off..], (rs, 1));
                    }
                }
                for (j, gj) in [(q, gq), (k, gk), (v, gv)] {
                    if self.rg(j) {
                        for (d, x) in acc!(j).iter_mut().zip(&gj) {
                            *d += *x;
                        }
                    }
                }
            }
            Op::GatherRows { src, idx, dim } => {
                let (src, dim) = (*src, *dim);
                let gs = acc!(src);
                for (r, &s) in idx.iter().enumerate() {
                    for j in 0..dim {
                        gs[s * dim + j] += g[r * dim + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    if self.rg(p) {
                        for (d, v) in acc!(p).iter_mut().zip(&g[off..off + len]) {
                            *d += *v;
                        }
                    }
                    off += len;
                }
            }
            Op::Dropout { a, mask } => {
                for ((d, v), m) in acc!(*a).iter_mut().zip(g).zip(mask) {
                    *d += *v * *m;
                }
            }
            &Op::Sum { a } => {
                for d in acc!(a).iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Mean { a } => {
                let s = g[0] / T::from_usize(nodes[a].value.numel()).unwrap();
                for d in acc!(a).iter_mut() {
                    *d += s;
                }
            }
            Op::CrossEntropy { logits, labels, probs, classes } => {
                let classes = *classes;
                let s = g[0] / T::from_usize(labels.len()).unwrap();
                let gl = acc!(*logits);
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        gl[r * classes + j] += s * (probs[r * classes + j] - onehot);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pd = self.data(*pred);
                let s = g[0] * T::from_f64_lossy(2.0) / T::from_usize(target.len()).unwrap();
                for ((d, p), t) in acc!(*pred).iter_mut().zip(pd).zip(target) {
                    *d += s * (*p - *t);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new(false, 0);
        let p = g.input(Tensor::new(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap().with_grad());
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gives_identity() {
        let vals = vec![0.5, -1.25, 3.0];
        let mut g = Graph::<f64>::new(false, 0);
        let p = g.input(Tensor::from_vec(vals.clone()).with_grad());
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.of(p).unwrap(), vals.as_slice());
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::<f32>::new(false, 0);
        let p = g.input(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let s = g.sum(p);
        g.backward(s).unwrap();
        let err = g.backward(s).err().unwrap();
        assert_eq!(err.to_string(), "graph consumed");
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new(false, 0);
        let p = g.input(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let q = g.input(Tensor::from_vec(vec![3.0]).with_grad());
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(q).unwrap(), &[0.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::<f32>::new(false, 3);
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5);
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn dropout_train_rescales_kept_units() {
        let mut g = Graph::<f64>::new(true, 3);
        let x = g.input(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.25);
        for v in g.value(y).data() {
            assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-12);
        }
        let kept = g.value(y).data().iter().filter(|v| **v > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::<f64>::new(false, 0);
        let uniform = g.input(Tensor::zeros(&[1, 5]));
        let ce = g.cross_entropy(uniform, &[2]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 5];
        peaked[3] = 10.0;
        let p = g.input(Tensor::new(&[1, 5], peaked).unwrap());
        let ce = g.cross_entropy(p, &[3]).unwrap();
        assert!(g.value(ce).item() < 1e-3);
        assert!(g.cross_entropy(p, &[7]).is_err());
    }

    #[test]
    fn mse_zero_when_equal() {
        let mut g = Graph::<f32>::new(false, 0);
        let p = g.input(Tensor::from_vec(vec![0.5, -0.5]));
        let l = g.mse(p, &[0.5, -0.5]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn gaussian_sample_with_zero_noise_is_mean() {
        let mut g = Graph::<f64>::new(true, 0);
        let mu = g.input(Tensor::from_vec(vec![1.0, -2.0]).with_grad());
        let ls = g.input(Tensor::from_vec(vec![0.3, 0.1]).with_grad());
        let (z, eps) = g.gaussian_sample(mu, ls, Some(Tensor::zeros(&[2]))).unwrap();
        assert_eq!(eps.data(), &[0.0, 0.0]);
        assert_eq!(g.value(z).data(), &[1.0, -2.0]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::<f64>::new(false, 0);
        let x = g.input(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -3.0, 0.5, 9.0, 2.0]).unwrap());
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}

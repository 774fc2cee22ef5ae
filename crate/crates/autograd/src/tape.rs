//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! Every op appends a node holding its value and enough saved state to
//! run its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse and returns a [`Gradients`] table; nothing is mutated in place,
//! so one tape can be differentiated more than once.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{AutogradError, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulGroups(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu { a: Var, tanh: Vec<T> },
    Elu(Var, T),
    LeakyRelu(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterAddRows { a: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SegmentSoftmax { a: Var, seg: Vec<usize>, num_segments: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward computation and its recorded history.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
    training: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits a shape into (rows, row width) along the first axis.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&r, rest)) => (r, numel(rest)),
        None => (1, 1),
    }
}

/// Splits a shape into (leading size, last axis).
fn last_axis(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&n, rest)) => (numel(rest), n),
        None => (1, 1),
    }
}

/// `tanh` through a single `exp`; much cheaper than the libm routine.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::c(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            frozen: Vec::new(),
            training: true,
        }
    }

    /// Tape in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        let mut t = Self::new();
        t.training = false;
        t
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(AutogradError::NonFinite(format!("{:?}", op_name(&op))));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(shape_err("leaf", &shape, &[value.len()]));
        }
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn var(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        self.leaf(shape.to_vec(), value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        self.leaf(shape.to_vec(), value, false)
    }

    /// Binds a stored parameter onto the tape, once per name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))?;
        let trainable = !self.frozen.iter().any(|f| name.starts_with(f.as_str()));
        let v = self.leaf(p.shape.clone(), p.data.clone(), trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names and handles of every parameter bound so far.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    // ---- linear algebra ------------------------------------------------

    /// `a [m,k] · b [k,n]`, or `a · bᵀ` with `b [n,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(m, k, n, self.value(a), (k, 1), self.value(b), bs, T::zero(), &mut out, (n, 1));
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched matmul over the leading axis: `a [B,m,k] · b [B,k,n]`
    /// (or `b [B,n,k]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                bs,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_row(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (_, n) = last_axis(self.shape(a));
        if self.value(row).len() != n {
            return Err(shape_err(op, self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        Ok(self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|c| c.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect())
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("add_row", a, row, |x, y| x + y)?;
        self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row (last axis) by a vector elementwise.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("mul_row", a, row, |x, y| x * y)?;
        self.push(self.shape(a).to_vec(), out, Op::MulRow(a, row), &[a, row])
    }

    /// Scales contiguous groups of `a` by the matching entry of `w`:
    /// with `a` viewed as `[w.len(), g]`, `out[i, j] = a[i, j] * w[i]`.
    pub fn mul_groups(&mut self, a: Var, w: Var) -> Result<Var> {
        let (na, nw) = (self.value(a).len(), self.value(w).len());
        if nw == 0 || na % nw != 0 {
            return Err(shape_err("mul_groups", self.shape(a), self.shape(w)));
        }
        let g = na / nw;
        let wv = self.value(w);
        let out = self
            .value(a)
            .chunks(g)
            .zip(wv)
            .flat_map(|(c, &s)| c.iter().map(move |&x| x * s))
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::MulGroups(a, w), &[a, w])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::c(GELU_C), T::c(GELU_A));
        let half = T::c(0.5);
        let tanh: Vec<T> = self
            .value(a)
            .iter()
            .map(|&x| fast_tanh(c * (x + k * x * x * x)))
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| half * x * (T::one() + t))
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a, tanh }, &[a])
    }

    pub fn elu(&mut self, a: Var, alpha: T) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { alpha * x.exp_m1() })
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Elu(a, alpha), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { slope * x })
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::LeakyRelu(a, slope), &[a])
    }

    // ---- normalization -------------------------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, n) = last_axis(self.shape(x));
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::c(eps);
        let nt = T::from_usize(n).unwrap();
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); rows * n];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
            let rs = (var + eps).sqrt().recip();
            for j in 0..n {
                out[r * n + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = last_axis(self.shape(a));
        let out = softmax_rows(self.value(a), n);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = last_axis(self.shape(a));
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(n.max(1)) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), &[a])
    }

    /// Softmax within groups of rows sharing a segment id, independently per
    /// column. `a` is `[E, H]`, `seg[e] < num_segments`.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let (e, h) = rows_of(self.shape(a));
        if seg.len() != e {
            return Err(shape_err("segment_softmax", self.shape(a), &[seg.len()]));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= num_segments) {
            return Err(AutogradError::Index {
                op: "segment_softmax",
                index: bad,
                len: num_segments,
            });
        }
        let av = self.value(a);
        let mut max = vec![T::neg_infinity(); num_segments * h];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..h {
                let m = &mut max[s * h + j];
                *m = m.max(av[i * h + j]);
            }
        }
        let mut out = vec![T::zero(); e * h];
        let mut denom = vec![T::zero(); num_segments * h];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..h {
                let z = (av[i * h + j] - max[s * h + j]).exp();
                out[i * h + j] = z;
                denom[s * h + j] += z;
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..h {
                out[i * h + j] /= denom[s * h + j];
            }
        }
        self.push(
            self.shape(a).to_vec(),
            out,
            Op::SegmentSoftmax {
                a,
                seg: seg.to_vec(),
                num_segments,
            },
            &[a],
        )
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, &[a])
    }

    // ---- losses --------------------------------------------------------

    /// Weighted mean negative log-likelihood of `targets` under
    /// softmax(`logits`). Rows with weight zero are excluded; if every
    /// weight is zero the loss is exactly zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (m, v) = last_axis(self.shape(logits));
        if targets.len() != m || weights.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len(), weights.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(AutogradError::Index {
                op: "cross_entropy",
                index: bad,
                len: v,
            });
        }
        let lv = self.value(logits);
        let probs = softmax_rows(lv, v);
        let total: T = weights.iter().copied().sum();
        let mut loss = T::zero();
        if total > T::zero() {
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w != T::zero() {
                    let row = &lv[r * v..(r + 1) * v];
                    loss += w * (log_sum_exp(row) - row[t]);
                }
            }
            loss /= total;
        }
        self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- indexing and layout ------------------------------------------

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, w) = rows_of(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutogradError::Index {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&av[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape(a).to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        self.push(shape, out, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    /// Sums row `i` of `a` into row `idx[i]` of a zero tensor with `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, w) = rows_of(self.shape(a));
        if idx.len() != n {
            return Err(shape_err("scatter_add_rows", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutogradError::Index {
                op: "scatter_add_rows",
                index: bad,
                len: rows,
            });
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); rows * w];
        for (i, &d) in idx.iter().enumerate() {
            for j in 0..w {
                out[d * w + j] += av[i * w + j];
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = rows;
        self.push(shape, out, Op::ScatterAddRows { a, idx: idx.to_vec() }, &[a])
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(shape_err("concat_cols", &first, &[]));
        }
        let m = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(shape_err("concat_cols", &first, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Concatenates tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let tail = first[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", &first, s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = first;
        shape[0] = rows;
        self.push(shape, out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_values(self.value(a), &s, perm);
        self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s: T = self.value(a).iter().copied().sum();
        let m = if n == 0 { T::zero() } else { s / T::from_usize(n).unwrap() };
        self.push(vec![], vec![m], Op::Mean(a), &[a])
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (_, n) = last_axis(&s);
        let out = self.value(a).chunks(n.max(1)).map(|c| c.iter().copied().sum()).collect();
        let shape = s[..s.len().saturating_sub(1)].to_vec();
        self.push(shape, out, Op::SumLast(a), &[a])
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(AutogradError::NonScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(AutogradError::NonFinite(format!(
                        "gradient of {}",
                        op_name(&self.nodes[i].op)
                    )));
                }
            }
        }
        Ok(Gradients {
            grads,
            bound: self
                .bound
                .iter()
                .filter(|(_, v)| self.nodes[v.0].requires_grad)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = node.shape[1];
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    // dA = G · Bᵀ
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, g, (n, 1), bv, bs, T::one(), ga, (k, 1));
                });
                acc(b, &mut |gb| {
                    if trans_b {
                        // dB = Gᵀ · A, shape [n,k]
                        T::gemm(n, m, k, g, (1, n), av, (k, 1), T::one(), gb, (k, 1));
                    } else {
                        // dB = Aᵀ · G, shape [k,n]
                        T::gemm(k, m, n, av, (1, k), g, (n, 1), T::one(), gb, (n, 1));
                    }
                });
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = &self.nodes[a.0].shape;
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    for t in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            &bv[t * k * n..(t + 1) * k * n],
                            bs,
                            T::one(),
                            &mut ga[t * m * k..(t + 1) * m * k],
                            (k, 1),
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gt, (1, n), at, (k, 1), T::one(), out, (k, 1));
                        } else {
                            T::gemm(k, m, n, at, (1, k), gt, (n, 1), T::one(), out, (n, 1));
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let n = self.value(row).len();
                acc(a, &mut |ga| add_into(ga, g));
                acc(row, &mut |gr| {
                    for c in g.chunks(n) {
                        add_into(gr, c);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let n = self.value(row).len();
                let (av, rv) = (self.value(a), self.value(row));
                acc(a, &mut |ga| {
                    for (gc, gi) in ga.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gc[j] += gi[j] * rv[j];
                        }
                    }
                });
                acc(row, &mut |gr| {
                    for (ac, gi) in av.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gr[j] += gi[j] * ac[j];
                        }
                    }
                });
            }
            &Op::MulGroups(a, w) => {
                let (av, wv) = (self.value(a), self.value(w));
                let gsz = av.len() / wv.len();
                acc(a, &mut |ga| {
                    for ((gc, gi), &s) in ga.chunks_mut(gsz).zip(g.chunks(gsz)).zip(wv) {
                        for j in 0..gsz {
                            gc[j] += gi[j] * s;
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for ((x, gi), ac) in gw.iter_mut().zip(g.chunks(gsz)).zip(av.chunks(gsz)) {
                        *x += gi.iter().zip(ac).map(|(&p, &q)| p * q).sum::<T>();
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * s)),
            &Op::Relu(a) => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Gelu { a, tanh } => {
                let a = *a;
                let av = self.value(a);
                let (c, k) = (T::c(GELU_C), T::c(GELU_A));
                let (half, three) = (T::c(0.5), T::c(3.0));
                acc(a, &mut |ga| {
                    for (((x, &gi), &v), &t) in ga.iter_mut().zip(g).zip(av).zip(tanh) {
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *x += gi * d;
                    }
                });
            }
            &Op::Elu(a, alpha) => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(av) {
                        *x += if v > T::zero() { gi } else { gi * alpha * v.exp() };
                    }
                });
            }
            &Op::LeakyRelu(a, slope) => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(av) {
                        *x += if v > T::zero() { gi } else { gi * slope };
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = self.value(gamma).len();
                let nt = T::from_usize(n).unwrap();
                let (xv, gv) = (self.value(x), self.value(gamma));
                let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
                acc(gamma, &mut |gg| {
                    for r in 0..mean.len() {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat(r, j);
                        }
                    }
                });
                acc(beta, &mut |gb| {
                    for c in g.chunks(n) {
                        add_into(gb, c);
                    }
                });
                acc(x, &mut |gx| {
                    for r in 0..mean.len() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            s1 += d;
                            s2 += d * xhat(r, j);
                        }
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            gx[r * n + j] += rstd[r] / nt * (nt * d - s1 - xhat(r, j) * s2);
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                acc(a, &mut |ga| {
                    for ((gc, gi), yc) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = gi.iter().zip(yc).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            gc[j] += yc[j] * (gi[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let n = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                acc(a, &mut |ga| {
                    for ((gc, gi), yc) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: T = gi.iter().copied().sum();
                        for j in 0..n {
                            gc[j] += gi[j] - yc[j].exp() * s;
                        }
                    }
                });
            }
            Op::SegmentSoftmax { a, seg, num_segments } => {
                let h = node.shape.get(1..).map(numel).unwrap_or(1);
                let y = &node.value;
                let mut dot = vec![T::zero(); num_segments * h];
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..h {
                        dot[s * h + j] += y[e * h + j] * g[e * h + j];
                    }
                }
                acc(*a, &mut |ga| {
                    for (e, &s) in seg.iter().enumerate() {
                        for j in 0..h {
                            ga[e * h + j] += y[e * h + j] * (g[e * h + j] - dot[s * h + j]);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |ga| {
                for ((x, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += gi * m;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = *self.nodes[logits.0].shape.last().unwrap_or(&1);
                let total: T = weights.iter().copied().sum();
                if total > T::zero() {
                    acc(*logits, &mut |gl| {
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            let s = g[0] * w / total;
                            for j in 0..v {
                                gl[r * v + j] += s * probs[r * v + j];
                            }
                            gl[r * v + t] -= s;
                        }
                    });
                }
            }
            Op::GatherRows { a, idx } => {
                let w = rows_of(&node.shape).1;
                acc(*a, &mut |ga| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut ga[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::ScatterAddRows { a, idx } => {
                let w = rows_of(&node.shape).1;
                acc(*a, &mut |ga| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut ga[k * w..(k + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    acc(p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            &Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, g)),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_values(g, &node.shape, &inv);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a.0].value.len().max(1)).unwrap();
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            &Op::SumLast(a) => {
                let n = last_axis(&self.nodes[a.0].shape).1;
                acc(a, &mut |ga| {
                    for (c, &gi) in ga.chunks_mut(n).zip(g) {
                        c.iter_mut().for_each(|x| *x += gi);
                    }
                });
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::MulGroups(..) => "mul_groups",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Elu(..) => "elu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Dropout { .. } => "dropout",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterAddRows { .. } => "scatter_add_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumLast(_) => "sum_last",
        Op::SegmentSoftmax { .. } => "segment_softmax",
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Row-wise softmax over contiguous chunks of width `n`.
pub fn softmax_rows<T: Real>(values: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(n.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut s = T::zero();
        for &x in row {
            let e = (x - m).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= s);
    }
    out
}

fn permute_values<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    // Trailing axes left in place form contiguous blocks copied whole.
    let mut outer = rank;
    while outer > 0 && perm[outer - 1] == outer - 1 {
        outer -= 1;
    }
    let block: usize = shape[outer..].iter().product();
    if outer == 0 || block == 0 {
        return src.to_vec();
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm[..outer].iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm[..outer].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; outer];
    let mut off = 0usize;
    for _ in 0..src.len() / block {
        out.extend_from_slice(&src[off..off + block]);
        for ax in (0..outer).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable bound parameter; parameters the loss
    /// does not depend on get an all-zero entry.
    pub fn params(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

//! Recorded forward computation with exact reverse-mode gradients.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its output
//! value, so node order is a topological order by construction. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products into the
//! leaves. [`Graph::replay`] re-evaluates every recorded primitive from the
//! current leaf values, which is what [`finite_diff_check`] uses to probe the
//! loss numerically without rebuilding the computation.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Rows whose L2 norm falls below this are treated as dead.
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, Option<Arc<[bool]>>),
    L2Normalize { x: Var, exempt_zero: bool },
    Gather(Var, Arc<[usize]>),
    Dropout(Var, Arc<[T]>),
    MaskedSum(Var, Option<Arc<[bool]>>),
    MaskedMean(Var, Option<Arc<[bool]>>),
    Reshape(Var, Vec<usize>),
    /// Constant block-diagonal matrix times `x`; `adj` holds the square blocks
    /// (sizes in `sizes`) back to back, row-major.
    BlockMatMul {
        x: Var,
        sizes: Arc<[usize]>,
        adj: Arc<[T]>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
        mask: Option<Arc<[bool]>>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Cached softmax probabilities for the fused cross-entropy node.
    aux: Option<Tensor<T>>,
    requires_grad: bool,
}

/// The recorded computation for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one row restricted to `mask` (masked entries become exactly zero).
fn softmax_row<T: Scalar>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) -> Result<()> {
    let live = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if live(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::invalid("softmax over a row with no live entries"));
    }
    let mut total = T::zero();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if live(j) { (v - max).exp() } else { T::zero() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op<T>, value: Tensor<T>, aux: Option<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, None, true)
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, None, false)
    }

    /// Whether `v` is a leaf node.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// All trainable leaves in recording order.
    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .map(Var)
            .filter(|&v| self.is_leaf(v) && self.nodes[v.0].requires_grad)
            .collect()
    }

    /// Replaces a leaf value. Call [`Graph::replay`] afterwards to refresh dependents.
    pub fn set_leaf(&mut self, v: Var, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid("set_leaf on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, value, aux, requires_grad))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x, _)
            | Op::L2Normalize { x, .. }
            | Op::Gather(x, _)
            | Op::Dropout(x, _)
            | Op::MaskedSum(x, _)
            | Op::MaskedMean(x, _)
            | Op::Reshape(x, _)
            | Op::BlockMatMul { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux) = self.eval(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    fn eval(&self, op: &Op<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::MatMul(a, b) => matmul_forward(val(a), val(b))?,
            Op::Transpose(x) => {
                let x = val(x);
                if x.shape().len() != 2 {
                    return Err(shape_err("transpose", x.shape(), &[]));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let d = x.data();
                Tensor::from_fn(vec![c, r], |k| d[(k % r) * c + k / r])
            }
            Op::Add(a, b) => binary_broadcast("add", val(a), val(b), |x, y| x + y)?,
            Op::Sub(a, b) => binary_broadcast("sub", val(a), val(b), |x, y| x - y)?,
            Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(shape_err("mul", a.shape(), b.shape()));
                }
                let (ad, bd) = (a.data(), b.data());
                Tensor::from_fn(a.shape().to_vec(), |k| ad[k] * bd[k])
            }
            Op::Scale(x, s) => val(x).map(|v| v * *s),
            Op::Concat(a, b) => {
                let (a, b) = (val(a), val(b));
                let (sa, sb) = (a.shape(), b.shape());
                if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                    return Err(shape_err("concat", sa, sb));
                }
                let (p, q) = (a.last_dim(), b.last_dim());
                let mut shape = sa.to_vec();
                *shape.last_mut().unwrap() = p + q;
                let mut data = Vec::with_capacity(a.len() + b.len());
                for r in 0..a.rows() {
                    data.extend_from_slice(a.row(r));
                    data.extend_from_slice(b.row(r));
                }
                Tensor::new(shape, data)?
            }
            Op::Sigmoid(x) => val(x).map(sigmoid),
            Op::Tanh(x) => val(x).map(|v| v.tanh()),
            Op::Exp(x) => val(x).map(|v| v.exp()),
            Op::Log(x) => val(x).map(|v| v.ln()),
            Op::Softmax(x, mask) => {
                let x = val(x);
                let d = x.last_dim();
                let mut out = Tensor::zeros(x.shape().to_vec());
                for r in 0..x.rows() {
                    let m = mask.as_deref().map(|m| &m[r * d..(r + 1) * d]);
                    softmax_row(x.row(r), m, out.row_mut(r))?;
                }
                out
            }
            Op::L2Normalize { x, exempt_zero } => {
                let x = val(x);
                let mut out = x.clone();
                for (r, n) in x.row_norms().into_iter().enumerate() {
                    if *exempt_zero && n == T::zero() {
                        continue;
                    }
                    if n.as_f64() < MIN_NORM {
                        return Err(Error::NearZeroNorm {
                            op: "l2_normalize",
                            row: r,
                            norm: n.as_f64(),
                        });
                    }
                    out.row_mut(r).iter_mut().for_each(|v| *v /= n);
                }
                out
            }
            Op::Gather(x, idx) => {
                let x = val(x);
                let d = x.last_dim();
                let rows = x.rows();
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx.iter() {
                    if i >= rows {
                        return Err(Error::invalid(format!("gather index {i} out of range for {rows} rows")));
                    }
                    data.extend_from_slice(x.row(i));
                }
                Tensor::new(vec![idx.len(), d], data)?
            }
            Op::Dropout(x, mask) => {
                let x = val(x);
                let xd = x.data();
                Tensor::from_fn(x.shape().to_vec(), |k| xd[k] * mask[k])
            }
            Op::MaskedSum(x, mask) => {
                let x = val(x);
                let s = x
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask.as_deref().map_or(true, |m| m[*k]))
                    .map(|(_, &v)| v)
                    .sum();
                Tensor::scalar(s)
            }
            Op::MaskedMean(x, mask) => {
                let x = val(x);
                let (mut s, mut n) = (T::zero(), 0usize);
                for (k, &v) in x.data().iter().enumerate() {
                    if mask.as_deref().map_or(true, |m| m[k]) {
                        s += v;
                        n += 1;
                    }
                }
                if n == 0 {
                    return Err(Error::invalid("masked mean over an empty selection"));
                }
                Tensor::scalar(s / T::lit(n as f64))
            }
            Op::Reshape(x, shape) => val(x).clone().reshape(shape.clone())?,
            Op::BlockMatMul { x, sizes, adj } => {
                let x = val(x);
                let d = x.last_dim();
                let xd = x.data();
                let mut out = vec![T::zero(); x.len()];
                let (mut row, mut at) = (0, 0);
                for &n in sizes.iter() {
                    for i in 0..n {
                        let oi = &mut out[(row + i) * d..(row + i + 1) * d];
                        for j in 0..n {
                            let w = adj[at + i * n + j];
                            if w == T::zero() {
                                continue;
                            }
                            for (o, &v) in oi.iter_mut().zip(&xd[(row + j) * d..(row + j + 1) * d]) {
                                *o += w * v;
                            }
                        }
                    }
                    row += n;
                    at += n * n;
                }
                Tensor::new(x.shape().to_vec(), out)?
            }
            Op::SoftmaxCrossEntropy { logits, targets, mask } => {
                let x = val(logits);
                let c = x.last_dim();
                if targets.len() != x.rows() {
                    return Err(shape_err("softmax_cross_entropy", x.shape(), &[targets.len()]));
                }
                let mut probs = Tensor::zeros(x.shape().to_vec());
                let mut losses = Vec::with_capacity(targets.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t >= c || mask.as_deref().is_some_and(|m| !m[t]) {
                        return Err(Error::invalid(format!("target {t} is not a live class")));
                    }
                    let row = x.row(r);
                    let live = |j: usize| mask.as_deref().map_or(true, |m| m[j]);
                    let max = (0..c).filter(|&j| live(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
                    let lse = (0..c)
                        .filter(|&j| live(j))
                        .map(|j| (row[j] - max).exp())
                        .sum::<T>()
                        .ln()
                        + max;
                    losses.push(lse - row[t]);
                    let pr = probs.row_mut(r);
                    for j in 0..c {
                        pr[j] = if live(j) { (row[j] - lse).exp() } else { T::zero() };
                    }
                }
                return Ok((Tensor::new(vec![targets.len()], losses)?, Some(probs)));
            }
        };
        Ok((out, None))
    }

    // ---- primitives ----

    /// `[n,k]·[k,m]`, `[..,n,k]·[k,m]` (shared right operand) or `[B,n,k]·[B,k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Transpose(x))
    }

    /// Elementwise add; `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.record(Op::Scale(x, s))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Concat(a, b))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Log(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax(x, None))
    }

    /// Softmax along the last axis over entries where `mask` is true; the rest are zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("masked_softmax", self.shape(x), &[mask.len()]));
        }
        self.record(Op::Softmax(x, Some(mask)))
    }

    /// Row-wise L2 normalization. With `exempt_zero`, exactly-zero rows pass through
    /// unchanged; any other row with norm below [`MIN_NORM`] is an error.
    pub fn l2_normalize(&mut self, x: Var, exempt_zero: bool) -> Result<Var> {
        self.record(Op::L2Normalize { x, exempt_zero })
    }

    /// Row gather (index select); the gradient scatter-adds back into the source rows.
    pub fn gather(&mut self, x: Var, indices: Arc<[usize]>) -> Result<Var> {
        self.record(Op::Gather(x, indices))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, this is the identity and
    /// records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Arc<[T]> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.record(Op::Dropout(x, mask))
    }

    /// `blockdiag(A_1, …, A_B) · x` for a 2-D `x` whose rows are grouped by block.
    pub fn block_matmul(&mut self, x: Var, sizes: Arc<[usize]>, adj: Arc<[T]>) -> Result<Var> {
        let shape = self.value(x).shape();
        let rows: usize = sizes.iter().sum();
        let cells: usize = sizes.iter().map(|n| n * n).sum();
        if shape.len() != 2 || shape[0] != rows || adj.len() != cells {
            return Err(shape_err("block_matmul", shape, &[rows, cells]));
        }
        self.record(Op::BlockMatMul { x, sizes, adj })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MaskedSum(x, None))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MaskedMean(x, None))
    }

    pub fn masked_sum(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("masked_sum", self.shape(x), &[mask.len()]));
        }
        self.record(Op::MaskedSum(x, Some(mask)))
    }

    pub fn masked_mean(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("masked_mean", self.shape(x), &[mask.len()]));
        }
        self.record(Op::MaskedMean(x, Some(mask)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.record(Op::Reshape(x, shape.into()))
    }

    /// Per-row `-log softmax(logits)[target]` over the live classes in `class_mask`.
    /// Output has one entry per row.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<[usize]>,
        class_mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        if let Some(m) = &class_mask {
            if m.len() != self.value(logits).last_dim() {
                return Err(shape_err("softmax_cross_entropy", self.shape(logits), &[m.len()]));
            }
        }
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            targets,
            mask: class_mask,
        })
    }

    // ---- reverse pass ----

    /// Reverse-mode accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.propagate(node, &gout, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor<T>| match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (da, db) = matmul_backward(av, bv, g, self.wants(*a), self.wants(*b));
                if let Some(da) = da {
                    acc(*a, da);
                }
                if let Some(db) = db {
                    acc(*b, db);
                }
            }
            Op::BlockMatMul { x, sizes, adj } => {
                let d = g.last_dim();
                let gd = g.data();
                let mut dx = vec![T::zero(); g.len()];
                let (mut row, mut at) = (0, 0);
                for &n in sizes.iter() {
                    for i in 0..n {
                        let gi = &gd[(row + i) * d..(row + i + 1) * d];
                        for j in 0..n {
                            let w = adj[at + i * n + j];
                            if w == T::zero() {
                                continue;
                            }
                            for (o, &v) in dx[(row + j) * d..(row + j + 1) * d].iter_mut().zip(gi) {
                                *o += w * v;
                            }
                        }
                    }
                    row += n;
                    at += n * n;
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let gd = g.data();
                acc(*x, Tensor::from_fn(vec![c, r], |k| gd[(k % r) * c + k / r]));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    let bv = val(*b);
                    if bv.shape() == g.shape() {
                        acc(*b, g.map(|v| v * sign));
                    } else {
                        let d = bv.len();
                        let mut db = vec![T::zero(); d];
                        for r in 0..g.rows() {
                            for (o, &v) in db.iter_mut().zip(g.row(r)) {
                                *o += v * sign;
                            }
                        }
                        acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                    }
                }
            }
            Op::Mul(a, b) => {
                let gd = g.data();
                if self.wants(*a) {
                    let bd = val(*b).data();
                    acc(*a, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * bd[k]));
                }
                if self.wants(*b) {
                    let ad = val(*a).data();
                    acc(*b, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * ad[k]));
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Concat(a, b) => {
                let (p, q) = (val(*a).last_dim(), val(*b).last_dim());
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..p + q]);
                }
                if self.wants(*a) {
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::Sigmoid(x) => {
                let (gd, yd) = (g.data(), y.data());
                acc(*x, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * yd[k] * (T::one() - yd[k])));
            }
            Op::Tanh(x) => {
                let (gd, yd) = (g.data(), y.data());
                acc(*x, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * (T::one() - yd[k] * yd[k])));
            }
            Op::Exp(x) => {
                let (gd, yd) = (g.data(), y.data());
                acc(*x, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * yd[k]));
            }
            Op::Log(x) => {
                let (gd, xd) = (g.data(), val(*x).data());
                acc(*x, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] / xd[k]));
            }
            Op::Softmax(x, _) => {
                let mut dx = Tensor::zeros(g.shape().to_vec());
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, .. } => {
                let xv = val(*x);
                let norms = xv.row_norms();
                let mut dx = Tensor::zeros(g.shape().to_vec());
                for (r, &n) in norms.iter().enumerate() {
                    if n == T::zero() {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::Gather(x, idx) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::Dropout(x, mask) => {
                let gd = g.data();
                acc(*x, Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * mask[k]));
            }
            Op::MaskedSum(x, mask) | Op::MaskedMean(x, mask) => {
                let xv = val(*x);
                let live = |k: usize| mask.as_deref().map_or(true, |m| m[k]);
                let coef = if matches!(node.op, Op::MaskedMean(..)) {
                    let n = (0..xv.len()).filter(|&k| live(k)).count();
                    g.data()[0] / T::lit(n as f64)
                } else {
                    g.data()[0]
                };
                acc(
                    *x,
                    Tensor::from_fn(xv.shape().to_vec(), |k| if live(k) { coef } else { T::zero() }),
                );
            }
            Op::Reshape(x, _) => {
                let shape = val(*x).shape().to_vec();
                acc(*x, g.clone().reshape(shape).unwrap());
            }
            Op::SoftmaxCrossEntropy { logits, targets, .. } => {
                let probs = node.aux.as_ref().expect("cross-entropy caches probabilities");
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = dx.row_mut(r);
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                acc(*logits, dx);
            }
        }
    }
}

fn binary_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let (ad, bd) = (a.data(), b.data());
        return Ok(Tensor::from_fn(a.shape().to_vec(), |k| f(ad[k], bd[k])));
    }
    if b.shape().len() == 1 && b.len() == a.last_dim() && !a.shape().is_empty() {
        let d = b.len();
        let (ad, bd) = (a.data(), b.data());
        return Ok(Tensor::from_fn(a.shape().to_vec(), |k| f(ad[k], bd[k % d])));
    }
    Err(shape_err(op, a.shape(), b.shape()))
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(shape_err("matmul", sa, sb));
    }
    if sb.len() == 2 {
        let k = sa[sa.len() - 1];
        if sb[0] != k {
            return Err(shape_err("matmul", sa, sb));
        }
        let m = sb[1];
        let n = a.len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = m;
        let mut c = vec![T::zero(); n * m];
        gemm_nn(a.data(), b.data(), &mut c, n, k, m);
        return Tensor::new(shape, c);
    }
    if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![T::zero(); bs * n * m];
        for i in 0..bs {
            gemm_nn(
                &a.data()[i * n * k..(i + 1) * n * k],
                &b.data()[i * k * m..(i + 1) * k * m],
                &mut c[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        return Tensor::new(vec![bs, n, m], c);
    }
    Err(shape_err("matmul", sa, sb))
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() == 2 {
        let (k, m) = (sb[0], sb[1]);
        let n = a.len() / k.max(1);
        let da = want_a.then(|| {
            let mut d = vec![T::zero(); n * k];
            gemm_nt(g.data(), b.data(), &mut d, n, m, k);
            Tensor::new(sa.to_vec(), d).unwrap()
        });
        let db = want_b.then(|| {
            let mut d = vec![T::zero(); k * m];
            gemm_tn(a.data(), g.data(), &mut d, n, k, m);
            Tensor::new(sb.to_vec(), d).unwrap()
        });
        return (da, db);
    }
    let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
    let da = want_a.then(|| {
        let mut d = vec![T::zero(); bs * n * k];
        for i in 0..bs {
            gemm_nt(
                &g.data()[i * n * m..(i + 1) * n * m],
                &b.data()[i * k * m..(i + 1) * k * m],
                &mut d[i * n * k..(i + 1) * n * k],
                n,
                m,
                k,
            );
        }
        Tensor::new(sa.to_vec(), d).unwrap()
    });
    let db = want_b.then(|| {
        let mut d = vec![T::zero(); bs * k * m];
        for i in 0..bs {
            gemm_tn(
                &a.data()[i * n * k..(i + 1) * n * k],
                &g.data()[i * n * m..(i + 1) * n * m],
                &mut d[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
            );
        }
        Tensor::new(sb.to_vec(), d).unwrap()
    });
    (da, db)
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Maximum relative error per checked leaf, in the order given.
    pub per_leaf: Vec<f64>,
    pub max_rel_err: f64,
}

/// Numerical derivative used by [`finite_diff_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+eps) − f(x−eps)) / 2eps`
    #[default]
    Central,
    /// Central differences at `eps` and `eps/2` combined as `(4·D(eps/2) − D(eps)) / 3`,
    /// which cancels the second-order truncation term. Useful when a wide step is
    /// needed to keep roundoff below tiny gradient entries.
    Richardson,
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` for every entry of every leaf in `leaves`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(graph: &mut Graph<f64>, loss: Var, leaves: &[Var], eps: f64) -> Result<GradCheck> {
    finite_diff_check_with(graph, loss, leaves, eps, Stencil::Central)
}

pub fn finite_diff_check_with(
    graph: &mut Graph<f64>,
    loss: Var,
    leaves: &[Var],
    eps: f64,
    stencil: Stencil,
) -> Result<GradCheck> {
    let analytic = graph.backward(loss)?;
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for &leaf in leaves {
        let grad = analytic.get(leaf);
        let original = graph.value(leaf).clone();
        let mut probe = original.clone();
        let mut eval_at = |k: usize, x: f64, graph: &mut Graph<f64>| -> Result<f64> {
            probe.data_mut()[k] = x;
            graph.set_leaf(leaf, probe.clone())?;
            graph.replay()?;
            probe.data_mut()[k] = original.data()[k];
            Ok(graph.value(loss).data()[0])
        };
        let mut worst = 0.0f64;
        for k in 0..original.len() {
            let x = original.data()[k];
            let mut central = |h: f64, graph: &mut Graph<f64>| -> Result<f64> {
                Ok((eval_at(k, x + h, graph)? - eval_at(k, x - h, graph)?) / (2.0 * h))
            };
            let numeric = match stencil {
                Stencil::Central => central(eps, graph)?,
                Stencil::Richardson => {
                    let wide = central(eps, graph)?;
                    let narrow = central(eps / 2.0, graph)?;
                    (4.0 * narrow - wide) / 3.0
                }
            };
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        graph.set_leaf(leaf, original)?;
        per_leaf.push(worst);
    }
    graph.replay()?;
    let max_rel_err = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck { per_leaf, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn block_matmul_matches_dense() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        // blocks [[0, 1], [0.5, 0.5]] and [[2]]
        let y = g
            .block_matmul(x, vec![2, 1].into(), vec![0.0, 1.0, 0.5, 0.5, 2.0].into())
            .unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 2.0, 3.0, 10.0, 12.0]);
        assert!(g.block_matmul(x, vec![2].into(), vec![1.0; 4].into()).is_err());
    }

    #[test]
    fn sigmoid_softmax_normalize_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);

        let x = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let sm = g.softmax(x).unwrap();
        for &v in g.value(sm).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let v = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let n = g.l2_normalize(v, false).unwrap();
        assert!((g.value(n).data()[0] - 0.6).abs() < 1e-15);
        assert!((g.value(n).data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn normalize_near_zero_row_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 1e-14, 0.0]));
        assert!(matches!(g.l2_normalize(a, false), Err(Error::NearZeroNorm { row: 1, .. })));
        let z = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(g.l2_normalize(z, true).is_ok());
        assert!(g.l2_normalize(z, false).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[3.0, -1.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn dot_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let y = g.param(t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(x, y).unwrap();
        let s = g.sum(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, 4.0]);
        assert_eq!(grads.get(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn normalize_gradient_is_tangent() {
        let mut g = Graph::<f64>::new();
        let v = g.param(t(&[1, 2], &[3.0, 4.0]));
        let target = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let n = g.l2_normalize(v, false).unwrap();
        let diff = g.sub(n, target).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.sum(sq).unwrap();
        let grad = g.backward(loss).unwrap().get(v);
        let radial = grad.data()[0] * 3.0 + grad.data()[1] * 4.0;
        assert!(radial.abs() < 1e-12, "radial component {radial}");
        let check = finite_diff_check(&mut g, loss, &[v], 1e-6).unwrap();
        assert!(check.max_rel_err < 1e-6, "{check:?}");
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let check = finite_diff_check(&mut g, s, &[x], 1e-5).unwrap();
        assert_eq!(check.max_rel_err, 0.0);
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn eval_mode_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.param(random(&[3, 4], &mut rng));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let s = g.sum(y).unwrap();
        assert!(finite_diff_check(&mut g, s, &[x], 1e-5).unwrap().max_rel_err < 1e-8);
    }

    #[test]
    fn train_mode_dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![1000], 1.0));
        let y = g.dropout(x, 0.25, true, &mut rng).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");
    }

    /// Each primitive checked against central differences on a random input.
    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        type Build = fn(&mut Graph<f64>, Var, Var, &mut ChaCha8Rng) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |g, a, b, _| g.matmul(a, b).unwrap()),
            ("transpose", |g, a, _, _| g.transpose(a).unwrap()),
            ("add", |g, a, _, _| g.add(a, a).unwrap()),
            ("add_broadcast", |g, a, _, r| {
                let bias = g.param(random(&[3], r));
                g.add(a, bias).unwrap()
            }),
            ("sub", |g, a, _, r| {
                let o = g.param(random(&[2, 3], r));
                g.sub(a, o).unwrap()
            }),
            ("mul", |g, a, _, r| {
                let o = g.param(random(&[2, 3], r));
                g.mul(a, o).unwrap()
            }),
            ("scale", |g, a, _, _| g.scale(a, -2.5).unwrap()),
            ("concat", |g, a, _, r| {
                let o = g.param(random(&[2, 2], r));
                g.concat(a, o).unwrap()
            }),
            ("sigmoid", |g, a, _, _| g.sigmoid(a).unwrap()),
            ("tanh", |g, a, _, _| g.tanh(a).unwrap()),
            ("exp", |g, a, _, _| g.exp(a).unwrap()),
            ("log", |g, a, _, _| {
                let e = g.exp(a).unwrap();
                g.log(e).unwrap()
            }),
            ("softmax", |g, a, _, _| g.softmax(a).unwrap()),
            ("masked_softmax", |g, a, _, _| {
                g.masked_softmax(a, vec![true, false, true, true, true, false].into()).unwrap()
            }),
            ("l2_normalize", |g, a, _, _| g.l2_normalize(a, false).unwrap()),
            ("gather", |g, a, _, _| g.gather(a, vec![1, 0, 1, 1].into()).unwrap()),
            ("block_matmul", |g, a, _, _| {
                let adj: Arc<[f64]> = vec![0.5, 0.0, 1.0, 0.25, -2.0].into();
                let two = g.block_matmul(a, vec![2].into(), adj[..4].into()).unwrap();
                let t = g.transpose(two).unwrap();
                g.block_matmul(t, vec![2, 1].into(), adj).unwrap()
            }),
            ("dropout", |g, a, _, r| g.dropout(a, 0.3, true, r).unwrap()),
            ("masked_mean", |g, a, _, _| {
                let m = g.masked_mean(a, vec![true, true, false, true, false, true].into()).unwrap();
                g.scale(m, 3.0).unwrap()
            }),
            ("reshape", |g, a, _, _| g.reshape(a, vec![3, 2]).unwrap()),
            ("batched_matmul", |g, a, _, r| {
                let x = g.reshape(a, vec![2, 1, 3]).unwrap();
                let y = g.param(random(&[2, 3, 2], r));
                g.matmul(x, y).unwrap()
            }),
        ];
        for (name, build) in cases {
            let mut g = Graph::<f64>::new();
            let a = g.param(random(&[2, 3], &mut rng));
            let b = g.param(random(&[3, 4], &mut rng));
            let out = build(&mut g, a, b, &mut rng);
            // weight the output so that the loss is not symmetric in its entries
            let w = g.constant(random(g.shape(out), &mut rng));
            let weighted = g.mul(out, w).unwrap();
            let loss = g.sum(weighted).unwrap();
            let leaves = g.params();
            let check = finite_diff_check(&mut g, loss, &leaves, 1e-5).unwrap();
            assert!(check.max_rel_err < 1e-4, "{name}: {check:?}");
        }
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.param(random(&[3, 5], &mut rng));
        let ce = g
            .softmax_cross_entropy(x, vec![0, 3, 2].into(), Some(vec![true, true, true, true, false].into()))
            .unwrap();
        let loss = g.mean(ce).unwrap();
        let check = finite_diff_check(&mut g, loss, &[x], 1e-5).unwrap();
        assert!(check.max_rel_err < 1e-6, "{check:?}");
        // masked class gets neither probability nor gradient
        let grad = g.backward(loss).unwrap().get(x);
        assert_eq!(grad.data()[4], 0.0);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let a = g.param(random(&[4, 3], &mut rng));
        let b = g.param(random(&[3, 3], &mut rng));
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m).unwrap();
        let l = g.log(s).unwrap();
        let loss = g.sum(l).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }
}

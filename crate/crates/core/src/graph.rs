//! Reverse-mode differentiation scoped to one layer's forward computation.
//!
//! A [`LocalGraph`] records every primitive applied while a layer runs
//! forward. [`LocalGraph::backward`] walks that record once in reverse and
//! returns gradients for every leaf created with [`LocalGraph::param`] or
//! [`LocalGraph::input`]. Tensors entering through [`LocalGraph::constant`]
//! are detached: nothing flows back into whatever produced them, which is
//! how layer boundaries are enforced.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::{sigmoid, softplus, Real};
use crate::tensor::{gemm, matmul, matmul_at, matmul_bt, sum, transpose, Tensor};

/// Divisor floor used by [`LocalGraph::l2_normalize_rows`].
pub const L2_EPS: f64 = 1e-12;
/// Default epsilon for [`LocalGraph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded in a [`LocalGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var, T),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    SoftmaxRows(Var),
    MeanAxis { x: Var, axis: usize },
    Concat { a: Var, b: Var, axis: usize },
    TakeIndex { x: Var, axis: usize, index: usize },
    L2NormalizeRows(Var),
    SwapAxes12(Var),
    Reshape(Var),
    ClampMax { x: Var, c: T },
    Select { mask: Vec<bool>, a: Var, b: Var },
    MaskedLogSumExpRows { x: Var, mask: Vec<bool> },
    WeightedSum { x: Var, w: Vec<T> },
    Sum(Var),
    SumSquaresRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

impl<T> Op<T> {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | AddBias(a, b) => vec![*a, *b],
            BatchMatMul { a, b, .. } | Concat { a, b, .. } | Select { a, b, .. } => vec![*a, *b],
            AddScalar(x, _) | Scale(x, _) | Relu(x) | Gelu(x) | Softplus(x) | SoftmaxRows(x) => {
                vec![*x]
            }
            L2NormalizeRows(x) | SwapAxes12(x) | Reshape(x) | Sum(x) | SumSquaresRows(x) => {
                vec![*x]
            }
            MeanAxis { x, .. }
            | TakeIndex { x, .. }
            | ClampMax { x, .. }
            | MaskedLogSumExpRows { x, .. }
            | WeightedSum { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Intermediates kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Norms(Vec<T>),
    Probs(Vec<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LocalGraph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let k = T::lit(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

fn eval<'a, T: Real + 'a>(
    op: &Op<T>,
    get: impl Fn(Var) -> &'a Tensor<T>,
) -> Result<(Tensor<T>, Saved<T>)> {
    use Op::*;
    let none = |t: Tensor<T>| Ok((t, Saved::None));
    match op {
        Leaf => Err(Error::State("leaf nodes are not evaluated")),
        MatMul(a, b) => none(matmul(get(*a), get(*b))?),
        MatMulBt(a, b) => none(matmul_bt(get(*a), get(*b))?),
        BatchMatMul { a, b, trans_b } => none(batch_matmul(get(*a), get(*b), *trans_b)?),
        Add(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.shape() != b.shape() {
                return Err(shape_err("add", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            none(Tensor::new(a.shape().to_vec(), data)?)
        }
        AddBias(x, bias) => {
            let (x, bias) = (get(*x), get(*bias));
            if bias.ndim() != 1 || bias.numel() != x.last_dim() {
                return Err(shape_err("add_bias", x.shape(), bias.shape()));
            }
            let c = x.last_dim();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bias.data()[i % c])
                .collect();
            none(Tensor::new(x.shape().to_vec(), data)?)
        }
        AddScalar(x, c) => none(get(*x).map(|v| v + *c)),
        Scale(x, c) => none(get(*x).map(|v| v * *c)),
        Relu(x) => none(get(*x).map(|v| if v > T::zero() { v } else { T::zero() })),
        Gelu(x) => none(get(*x).map(gelu)),
        Softplus(x) => none(get(*x).map(softplus)),
        LayerNorm { x, gain, bias, eps } => {
            let (x, gain, bias) = (get(*x), get(*gain), get(*bias));
            let c = x.last_dim();
            if gain.numel() != c || bias.numel() != c {
                return Err(shape_err("layer_norm", x.shape(), gain.shape()));
            }
            let rows = x.outer();
            let n = T::count(c);
            let mut out = Vec::with_capacity(x.numel());
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = x.row(r);
                let mean = sum(row) / n;
                let var = row
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                    / n;
                let is = T::one() / (var + *eps).sqrt();
                inv_std.push(is);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    out.push(h * gain.data()[j] + bias.data()[j]);
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), out)?,
                Saved::LayerNorm { xhat, inv_std },
            ))
        }
        SoftmaxRows(x) => none(softmax_rows(get(*x))),
        MeanAxis { x, axis } => {
            let x = get(*x);
            if *axis >= x.ndim() || x.shape()[*axis] == 0 {
                return Err(shape_err("mean_over_axis", x.shape(), &[*axis]));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let scale = T::one() / T::count(len);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let acc = &mut out[o * inner..(o + 1) * inner];
                for a in 0..len {
                    let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, &s) in acc.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                for d in acc.iter_mut() {
                    *d = *d * scale;
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            none(Tensor::new(shape, out)?)
        }
        Concat { a, b, axis } => none(concat(get(*a), get(*b), *axis)?),
        TakeIndex { x, axis, index } => {
            let x = get(*x);
            if *axis >= x.ndim() || *index >= x.shape()[*axis] {
                return Err(shape_err("take_index", x.shape(), &[*axis, *index]));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let start = (o * len + index) * inner;
                out.extend_from_slice(&x.data()[start..start + inner]);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            none(Tensor::new(shape, out)?)
        }
        L2NormalizeRows(x) => {
            let x = get(*x);
            let eps = T::lit(L2_EPS);
            let mut norms = Vec::with_capacity(x.outer());
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..x.outer() {
                let row = x.row(r);
                let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                norms.push(norm);
                let d = norm.max(eps);
                out.extend(row.iter().map(|&v| v / d));
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Norms(norms)))
        }
        SwapAxes12(x) => none(swap_axes12(get(*x))?),
        Reshape(_) => Err(State("reshape is recorded directly")),
        ClampMax { x, c } => none(get(*x).map(|v| if v < *c { v } else { *c })),
        Select { mask, a, b } => {
            let (a, b) = (get(*a), get(*b));
            if a.shape() != b.shape() || mask.len() != a.numel() {
                return Err(shape_err("select", a.shape(), b.shape()));
            }
            let data = mask
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(&m, (&x, &y))| if m { x } else { y })
                .collect();
            none(Tensor::new(a.shape().to_vec(), data)?)
        }
        MaskedLogSumExpRows { x, mask } => {
            let x = get(*x);
            if mask.len() != x.numel() {
                return Err(shape_err("masked_logsumexp", x.shape(), &[mask.len()]));
            }
            let c = x.last_dim();
            let mut out = Vec::with_capacity(x.outer());
            let mut probs = vec![T::zero(); x.numel()];
            for r in 0..x.outer() {
                let row = x.row(r);
                let m = &mask[r * c..(r + 1) * c];
                let mx = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .fold(T::neg_infinity(), |acc, (&v, _)| acc.max(v));
                if mx == T::neg_infinity() {
                    out.push(T::zero());
                    continue;
                }
                let p = &mut probs[r * c..(r + 1) * c];
                let mut total = T::zero();
                for j in 0..c {
                    if m[j] {
                        let e = (row[j] - mx).exp();
                        p[j] = e;
                        total = total + e;
                    }
                }
                for v in p.iter_mut() {
                    *v = *v / total;
                }
                out.push(mx + total.ln());
            }
            let mut shape = x.shape().to_vec();
            shape.pop();
            Ok((Tensor::new(shape, out)?, Saved::Probs(probs)))
        }
        WeightedSum { x, w } => {
            let x = get(*x);
            if w.len() != x.numel() {
                return Err(shape_err("weighted_sum", x.shape(), &[w.len()]));
            }
            let s = x
                .data()
                .iter()
                .zip(w)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            none(Tensor::scalar(s))
        }
        Sum(x) => none(Tensor::scalar(sum(get(*x).data()))),
        SumSquaresRows(x) => {
            let x = get(*x);
            let out = (0..x.outer())
                .map(|r| x.row(r).iter().fold(T::zero(), |acc, &v| acc + v * v))
                .collect();
            let mut shape = x.shape().to_vec();
            shape.pop();
            none(Tensor::new(shape, out)?)
        }
        CrossEntropy { logits, labels } => {
            let x = get(*logits);
            if x.ndim() != 2 || labels.len() != x.shape()[0] || x.shape()[1] < 2 {
                return Err(shape_err("cross_entropy", x.shape(), &[labels.len()]));
            }
            let c = x.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::Argument(alloc::format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
            let probs = softmax_rows(x).into_data();
            let mut total = T::zero();
            for (r, &label) in labels.iter().enumerate() {
                let row = x.row(r);
                let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let lse = mx + row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp()).ln();
                total = total + (lse - row[label]);
            }
            let loss = total / T::count(labels.len().max(1));
            Ok((Tensor::scalar(loss), Saved::Probs(probs)))
        }
    }
}

use Error::State;

/// Numerically stable softmax over the last axis.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.outer() {
        let row = x.row(r);
        let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            total = total + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn batch_matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(shape_err("batch_matmul", a.shape(), b.shape()));
    }
    let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, n) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if bk != k {
        return Err(shape_err("batch_matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); g * m * n];
    for gi in 0..g {
        let ablk = &a.data()[gi * m * k..(gi + 1) * m * k];
        let bblk = &b.data()[gi * k * n..(gi + 1) * k * n];
        let cblk = &mut out[gi * m * n..(gi + 1) * m * n];
        if trans_b {
            let bt = transpose(n, k, bblk);
            gemm(m, k, n, ablk, &bt, cblk);
        } else {
            gemm(m, k, n, ablk, bblk, cblk);
        }
    }
    Tensor::new(vec![g, m, n], out)
}

fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let ok = a.ndim() == b.ndim()
        && axis < a.ndim()
        && a
            .shape()
            .iter()
            .zip(b.shape())
            .enumerate()
            .all(|(i, (x, y))| i == axis || x == y);
    if !ok {
        return Err(shape_err("concat", a.shape(), b.shape()));
    }
    let (outer, la, inner) = split_axis(a.shape(), axis);
    let lb = b.shape()[axis];
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * la * inner..(o + 1) * la * inner]);
        out.extend_from_slice(&b.data()[o * lb * inner..(o + 1) * lb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = la + lb;
    Tensor::new(shape, out)
}

fn swap_axes12<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(shape_err("swap_axes12", x.shape(), &[4]));
    }
    let s = x.shape();
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(x.numel());
    for ai in 0..a {
        for ci in 0..c {
            for bi in 0..b {
                let start = ((ai * b + bi) * c + ci) * d;
                out.extend_from_slice(&x.data()[start..start + d]);
            }
        }
    }
    Tensor::new(vec![a, c, b, d], out)
}

impl<T: Real> LocalGraph<T> {
    pub fn new() -> Self {
        LocalGraph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf that still receives a gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Detached leaf; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Copies a recorded value out of the graph, severing any gradient linkage.
    pub fn detach(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let (value, saved) = {
            let nodes = &self.nodes;
            eval(&op, |v| &nodes[v.0].value)?
        };
        let requires_grad = op.operands().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulBt(a, b))
    }

    /// Batched product over the leading axis, optionally transposing `b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.record(Op::BatchMatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    /// Adds a 1-D bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddBias(x, bias))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.record(Op::AddScalar(x, c))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.record(Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softplus(x))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.record(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(x))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Op::MeanAxis { x, axis })
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.record(Op::Concat { a, b, axis })
    }

    /// Selects position `index` of `axis`, dropping that axis.
    pub fn take_index(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        self.record(Op::TakeIndex { x, axis, index })
    }

    /// Divides each last-axis row by `max(‖row‖, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::L2NormalizeRows(x))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SwapAxes12(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Reshape(x),
            saved: Saved::None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `min(x, c)`; the gradient is zero wherever `x >= c`.
    pub fn clamp_max(&mut self, x: Var, c: T) -> Result<Var> {
        self.record(Op::ClampMax { x, c })
    }

    /// Elementwise `if mask { a } else { b }`.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Select { mask, a, b })
    }

    /// Row-wise log-sum-exp over the masked entries of the last axis.
    /// Rows with an empty mask yield 0 and receive no gradient.
    pub fn masked_logsumexp_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.record(Op::MaskedLogSumExpRows { x, mask })
    }

    /// Scalar `Σ w ⊙ x` for a constant weight tensor laid out like `x`.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        self.record(Op::WeightedSum { x, w })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    /// Squared L2 norm of each last-axis row.
    pub fn sum_squares_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumSquaresRows(x))
    }

    /// Mean negative log-softmax probability of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropy { logits, labels })
    }

    /// Recomputes every recorded op from the leaves and returns the value
    /// of `output`. Matches the recorded value bit for bit.
    pub fn replay(&self, output: Var) -> Result<Tensor<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(output.0 + 1);
        for node in &self.nodes[..=output.0] {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(x) => values[x.0].clone().reshape(node.value.shape())?,
                op => eval(op, |v| &values[v.0])?.0,
            };
            values.push(v);
        }
        Ok(values.pop().expect("non-empty"))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[output.0].value.shape().to_vec();
        if self.nodes[output.0].value.numel() != 1 {
            return Err(shape_err("backward (scalar seed)", &shape, &[]));
        }
        self.backward_with(output, Tensor::full(&shape, T::one()))
    }

    /// Backward pass seeded with `seed = ∂(objective)/∂(output)`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("graph already consumed by a backward pass"));
        }
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(shape_err(
                "backward seed",
                self.nodes[output.0].value.shape(),
                seed.shape(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contribs = self.local_backward(i, &gy)?;
            for (v, g) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaves keep their gradients; intermediates were taken above.
        Ok(Gradients { grads })
    }

    fn local_backward(&self, i: usize, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        use Op::*;
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Leaf => {}
            MatMul(a, b) => {
                if needs(*a) {
                    out.push((*a, matmul_bt(gy, val(*b))?));
                }
                if needs(*b) {
                    out.push((*b, matmul_at(val(*a), gy)?));
                }
            }
            MatMulBt(a, b) => {
                if needs(*a) {
                    out.push((*a, matmul(gy, val(*b))?));
                }
                if needs(*b) {
                    out.push((*b, matmul_at(gy, val(*a))?));
                }
            }
            BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let g = av.shape()[0];
                let (m, k) = (av.shape()[1], av.shape()[2]);
                let n = gy.shape()[2];
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                for gi in 0..g {
                    let ab = &av.data()[gi * m * k..(gi + 1) * m * k];
                    let bb = &bv.data()[gi * k * n..(gi + 1) * k * n];
                    let gyb = &gy.data()[gi * m * n..(gi + 1) * m * n];
                    let gab = &mut ga[gi * m * k..(gi + 1) * m * k];
                    let gbb = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // C = A Bᵀ, B: [n, k]: dA = dC B, dB = dCᵀ A
                        gemm(m, n, k, gyb, bb, gab);
                        let gyt = transpose(m, n, gyb);
                        gemm(n, m, k, &gyt, ab, gbb);
                    } else {
                        // C = A B, B: [k, n]: dA = dC Bᵀ, dB = Aᵀ dC
                        let bt = transpose(k, n, bb);
                        gemm(m, n, k, gyb, &bt, gab);
                        let at = transpose(m, k, ab);
                        gemm(k, m, n, &at, gyb, gbb);
                    }
                }
                if needs(*a) {
                    out.push((*a, like(*a, ga)?));
                }
                if needs(*b) {
                    out.push((*b, like(*b, gb)?));
                }
            }
            Add(a, b) => {
                if needs(*a) {
                    out.push((*a, gy.clone()));
                }
                if needs(*b) {
                    out.push((*b, gy.clone()));
                }
            }
            AddBias(x, bias) => {
                if needs(*x) {
                    out.push((*x, gy.clone()));
                }
                if needs(*bias) {
                    let c = gy.last_dim();
                    let mut gb = vec![T::zero(); c];
                    for r in 0..gy.outer() {
                        for (d, &s) in gb.iter_mut().zip(gy.row(r)) {
                            *d = *d + s;
                        }
                    }
                    out.push((*bias, like(*bias, gb)?));
                }
            }
            AddScalar(x, _) => out.push((*x, gy.clone())),
            Scale(x, c) => out.push((*x, gy.map(|g| g * *c))),
            Relu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Gelu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| g * gelu_grad(v))
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Softplus(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| g * sigmoid(v))
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            LayerNorm { x, gain, bias, .. } => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    return Err(Error::State("missing layer-norm intermediates"));
                };
                let c = gy.last_dim();
                let rows = gy.outer();
                let gainv = val(*gain).data();
                let n = T::count(c);
                let mut gx = vec![T::zero(); gy.numel()];
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let gyr = gy.row(r);
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        ggain[j] = ggain[j] + gyr[j] * xh[j];
                        gbias[j] = gbias[j] + gyr[j];
                        dxhat[j] = gyr[j] * gainv[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xh[j];
                    }
                    let k = inv_std[r] / n;
                    for j in 0..c {
                        gx[r * c + j] = k * (n * dxhat[j] - s1 - xh[j] * s2);
                    }
                }
                if needs(*x) {
                    out.push((*x, like(*x, gx)?));
                }
                if needs(*gain) {
                    out.push((*gain, like(*gain, ggain)?));
                }
                if needs(*bias) {
                    out.push((*bias, like(*bias, gbias)?));
                }
            }
            SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = Vec::with_capacity(y.numel());
                for r in 0..y.outer() {
                    let yr = y.row(r);
                    let gyr = &gy.data()[r * c..(r + 1) * c];
                    let s = yr
                        .iter()
                        .zip(gyr)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    gx.extend(yr.iter().zip(gyr).map(|(&a, &b)| a * (b - s)));
                }
                out.push((*x, like(*x, gx)?));
            }
            MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let scale = T::one() / T::count(len);
                let mut gx = Vec::with_capacity(val(*x).numel());
                for o in 0..outer {
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|&g| g * scale));
                    }
                }
                out.push((*x, like(*x, gx)?));
            }
            Concat { a, b, axis } => {
                let (outer, la, inner) = split_axis(val(*a).shape(), *axis);
                let lb = val(*b).shape()[*axis];
                let mut ga = Vec::with_capacity(val(*a).numel());
                let mut gb = Vec::with_capacity(val(*b).numel());
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    ga.extend_from_slice(&gy.data()[base..base + la * inner]);
                    gb.extend_from_slice(&gy.data()[base + la * inner..base + (la + lb) * inner]);
                }
                if needs(*a) {
                    out.push((*a, like(*a, ga)?));
                }
                if needs(*b) {
                    out.push((*b, like(*b, gb)?));
                }
            }
            TakeIndex { x, axis, index } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let mut gx = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let start = (o * len + index) * inner;
                    gx[start..start + inner].copy_from_slice(&gy.data()[o * inner..(o + 1) * inner]);
                }
                out.push((*x, like(*x, gx)?));
            }
            L2NormalizeRows(x) => {
                let Saved::Norms(norms) = &node.saved else {
                    return Err(Error::State("missing norms"));
                };
                let y = &node.value;
                let c = y.last_dim();
                let eps = T::lit(L2_EPS);
                let mut gx = Vec::with_capacity(y.numel());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gyr = &gy.data()[r * c..(r + 1) * c];
                    if norm > eps {
                        let s = yr
                            .iter()
                            .zip(gyr)
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        gx.extend(yr.iter().zip(gyr).map(|(&a, &b)| (b - a * s) / norm));
                    } else {
                        gx.extend(gyr.iter().map(|&b| b / eps));
                    }
                }
                out.push((*x, like(*x, gx)?));
            }
            SwapAxes12(x) => {
                // Swapping axes 1 and 2 is its own inverse.
                let back = swap_axes12(gy)?;
                out.push((*x, back));
            }
            Reshape(x) => out.push((*x, gy.clone().reshape(val(*x).shape())?)),
            ClampMax { x, c } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v < *c { g } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Select { mask, a, b } => {
                if needs(*a) {
                    let d = mask
                        .iter()
                        .zip(gy.data())
                        .map(|(&m, &g)| if m { g } else { T::zero() })
                        .collect();
                    out.push((*a, like(*a, d)?));
                }
                if needs(*b) {
                    let d = mask
                        .iter()
                        .zip(gy.data())
                        .map(|(&m, &g)| if m { T::zero() } else { g })
                        .collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            MaskedLogSumExpRows { x, .. } => {
                let Saved::Probs(p) = &node.saved else {
                    return Err(Error::State("missing probabilities"));
                };
                let c = val(*x).last_dim();
                let d = p
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| pj * gy.data()[j / c])
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            WeightedSum { x, w } => {
                let g = gy.data()[0];
                out.push((*x, like(*x, w.iter().map(|&wi| wi * g).collect())?));
            }
            Sum(x) => {
                let g = gy.data()[0];
                out.push((*x, Tensor::full(val(*x).shape(), g)));
            }
            SumSquaresRows(x) => {
                let xv = val(*x);
                let c = xv.last_dim();
                let two = T::lit(2.0);
                let d = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| two * v * gy.data()[j / c])
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            CrossEntropy { logits, labels } => {
                let Saved::Probs(p) = &node.saved else {
                    return Err(Error::State("missing probabilities"));
                };
                let c = val(*logits).last_dim();
                let scale = gy.data()[0] / T::count(labels.len().max(1));
                let mut d: Vec<T> = p.iter().map(|&v| v * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] = d[r * c + l] - scale;
                }
                out.push((*logits, like(*logits, d)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = LocalGraph::new();
        let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut g = LocalGraph::new();
        let x = g.input(Tensor::<f32>::scalar(2.0));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::State(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = LocalGraph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.add(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = LocalGraph::new();
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let bias = g.constant(t(&[2], &[0.0, 0.0]));
        let x = g.constant(t(&[2, 2], &[5.0, 5.0, -1.0, 1.0]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(&g.value(y).data()[2..], &[-1.0, 1.0]);
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(&g.value(y).data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let row = [0.3, -1.2, 2.5, 0.7, -0.4];
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        let gain = [1.5, 0.5, -1.0, 2.0, 1.0];
        let bias = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mut g = LocalGraph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 5], row.map(|v| v as f32).to_vec()).unwrap());
        let gv = g.constant(Tensor::new(vec![5], gain.map(|v| v as f32).to_vec()).unwrap());
        let bv = g.constant(Tensor::new(vec![5], bias.map(|v| v as f32).to_vec()).unwrap());
        let y = g.layer_norm(x, gv, bv, 1e-5).unwrap();
        for j in 0..5 {
            let expect = (row[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j];
            assert!((g.value(y).data()[j] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 4], &[0.3, 0.3, 0.3, 0.3]));
        assert!(s.data().iter().all(|&v| v == 0.25));
        let s = softmax_rows(&Tensor::<f32>::new(vec![1, 3], vec![0.0, 1e4, 2.0]).unwrap());
        assert!((s.data()[1] - 1.0).abs() < 1e-6 && s.data()[0] < 1e-6);
        let row = [0.2, -0.7, 1.4];
        let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
        let s = softmax_rows(&t(&[1, 3], &row));
        for j in 0..3 {
            assert!((s.data()[j] - row[j].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_and_mean_examples() {
        let mut g = LocalGraph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);

        let row = [0.5f32, -1.0, 2.0];
        let tokens = Tensor::from_fn(&[64, 3], |i| row[i % 3]);
        let x = g.constant(tokens);
        let m = g.mean_over_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &row);

        let x = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = LocalGraph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 10]));
        let l = g.cross_entropy(x, vec![0, 4, 9]).unwrap();
        assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
        let mut logits = Tensor::zeros(&[1, 3]);
        logits.data_mut()[2] = 1e4;
        let x = g.constant(logits);
        let l = g.cross_entropy(x, vec![2]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
        assert!(matches!(
            g.cross_entropy(x, vec![3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = LocalGraph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.37).sin()));
        let w = g.param(Tensor::from_fn(&[6, 5], |i| (i as f32 * 0.11).cos()));
        let b = g.param(Tensor::from_fn(&[5], |i| i as f32 * 0.1));
        let h = g.matmul(x, w).unwrap();
        let h = g.add_bias(h, b).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.l2_normalize_rows(h).unwrap();
        let y = g.softmax_rows(h).unwrap();
        assert_eq!(g.replay(y).unwrap(), *g.value(y));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let n = v.len();
            let s = softmax_rows(&Tensor::new(vec![1, n], v).unwrap());
            let total: f32 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn l2_rows_have_unit_norm(v in proptest::collection::vec(-10.0f32..10.0, 2..32)) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f32>() > 1e-6);
            let n = v.len();
            let mut g = LocalGraph::new();
            let x = g.constant(Tensor::new(vec![1, n], v).unwrap());
            let y = g.l2_normalize_rows(x).unwrap();
            let norm: f32 = g.value(y).data().iter().map(|x| x * x).sum::<f32>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}

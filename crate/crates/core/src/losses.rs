//! Layer-local objectives: FF goodness losses, SymBa, cross-entropy, and the
//! (marginal) supervised contrastive loss with its analytic gradient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LocalGraph, Var};
use crate::real::{softplus, Real};
use crate::tensor::{matmul_bt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyperparams {
    /// FF goodness threshold.
    pub theta: f64,
    /// SymBa scale.
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Margin of the first layer; later layers follow [`margin_schedule`].
    pub m0: f64,
    /// Margin of the last layer.
    pub m_final: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        LossHyperparams {
            theta: 2.0,
            alpha: 1.0,
            tau: 0.1,
            m0: 0.4,
            m_final: 0.1,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(alloc::format!("loss.{what}")));
        if !(self.theta >= 0.0) {
            return bad("theta must be >= 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(0.0..=2.0).contains(&self.m0) || !(0.0..=2.0).contains(&self.m_final) {
            return bad("margins must lie in [0, 2]");
        }
        if self.m0 < self.m_final {
            return bad("m0 must be >= m_final");
        }
        Ok(())
    }
}

/// Per-layer margins, non-increasing from the first layer to the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginSchedule(Vec<f64>);

impl MarginSchedule {
    pub fn margins(&self) -> &[f64] {
        &self.0
    }

    pub fn layer(&self, l: usize) -> f64 {
        self.0[l]
    }
}

/// Linear decrease from `m0` at the first layer to `m_final` at the last.
/// A single layer gets `m_final`.
pub fn margin_schedule(layers: usize, m0: f64, m_final: f64) -> Result<MarginSchedule> {
    if layers == 0 {
        return Err(Error::Argument("margin schedule needs at least one layer".into()));
    }
    if m0 < m_final {
        return Err(Error::Argument(alloc::format!(
            "m0 ({m0}) must not be below the final margin ({m_final})"
        )));
    }
    if layers == 1 {
        return Ok(MarginSchedule(vec![m_final]));
    }
    let span = (layers - 1) as f64;
    Ok(MarginSchedule(
        (0..layers)
            .map(|l| {
                if l + 1 == layers {
                    m_final
                } else {
                    m0 - (m0 - m_final) * l as f64 / span
                }
            })
            .collect(),
    ))
}

/// Squared L2 norm.
pub fn goodness<T: Real>(row: &[T]) -> T {
    row.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

/// `Σ softplus(θ − g⁺) + softplus(g⁻ − θ)`.
pub fn ff_loss<T: Real>(g_pos: &[T], g_neg: &[T], theta: T) -> T {
    g_pos
        .iter()
        .zip(g_neg)
        .fold(T::zero(), |acc, (&p, &n)| {
            acc + softplus(theta - p) + softplus(n - theta)
        })
}

/// `Σ softplus(α (g⁻ − g⁺))`.
pub fn symba_loss<T: Real>(g_pos: &[T], g_neg: &[T], alpha: T) -> T {
    g_pos
        .iter()
        .zip(g_neg)
        .fold(T::zero(), |acc, (&p, &n)| acc + softplus(alpha * (n - p)))
}

pub fn ff_loss_var<T: Real>(g: &mut LocalGraph<T>, gpos: Var, gneg: Var, theta: T) -> Result<Var> {
    let a = g.scale(gpos, -T::one())?;
    let a = g.add_scalar(a, theta)?;
    let a = g.softplus(a)?;
    let b = g.add_scalar(gneg, -theta)?;
    let b = g.softplus(b)?;
    let s = g.add(a, b)?;
    g.sum(s)
}

pub fn symba_loss_var<T: Real>(
    g: &mut LocalGraph<T>,
    gpos: Var,
    gneg: Var,
    alpha: T,
) -> Result<Var> {
    let neg_pos = g.scale(gpos, -T::one())?;
    let diff = g.add(gneg, neg_pos)?;
    let z = g.scale(diff, alpha)?;
    let z = g.softplus(z)?;
    g.sum(z)
}

/// Mean cross-entropy of `logits: [B, C]` against integer labels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g = LocalGraph::new();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, labels.to_vec())?;
    Ok(g.value(l).data()[0])
}

/// Index sets for one anchor over a batch of representations.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct IndexPartition {
    pub anchor: usize,
    /// Same class, anchor excluded.
    pub positives: Vec<usize>,
    /// Different class.
    pub negatives: Vec<usize>,
    /// Positives whose similarity sits in the saturated region `sim + m >= 1`.
    pub clamped: Vec<usize>,
    /// Remaining positives.
    pub free: Vec<usize>,
}

impl IndexPartition {
    /// `A(k)`: every index except the anchor, ascending.
    pub fn all(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.positives.iter().chain(&self.negatives).copied().collect();
        a.sort_unstable();
        a
    }

    pub fn has_positives(&self) -> bool {
        !self.positives.is_empty()
    }
}

/// Builds `P, N, R, Rᶜ` for anchor `k` from its row of pairwise similarities.
pub fn partition_indices<T: Real>(
    labels: &[usize],
    k: usize,
    sims: &[T],
    margin: T,
) -> Result<IndexPartition> {
    if k >= labels.len() || sims.len() != labels.len() {
        return Err(Error::Argument(alloc::format!(
            "anchor {k} with {} labels and {} similarities",
            labels.len(),
            sims.len()
        )));
    }
    let mut part = IndexPartition {
        anchor: k,
        ..Default::default()
    };
    for (j, &l) in labels.iter().enumerate() {
        if j == k {
            continue;
        }
        if l == labels[k] {
            part.positives.push(j);
            if sims[j] + margin >= T::one() {
                part.clamped.push(j);
            } else {
                part.free.push(j);
            }
        } else {
            part.negatives.push(j);
        }
    }
    Ok(part)
}

/// Bookkeeping emitted alongside a contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContrastiveStats {
    /// `Σ_k |R(k)|`.
    pub clamped_pairs: usize,
    /// `Σ_k |P(k)|`.
    pub positive_pairs: usize,
    /// Anchors skipped because they had no positive.
    pub skipped_anchors: usize,
}

impl ContrastiveStats {
    pub fn merge(&mut self, other: &ContrastiveStats) {
        self.clamped_pairs += other.clamped_pairs;
        self.positive_pairs += other.positive_pairs;
        self.skipped_anchors += other.skipped_anchors;
    }

    /// Fraction of positive pairs inside the clamp, if any positive exists.
    pub fn rk_fraction(&self) -> Option<f64> {
        (self.positive_pairs > 0).then(|| self.clamped_pairs as f64 / self.positive_pairs as f64)
    }
}

/// Records the (marginal) supervised contrastive loss on `f` (unit rows).
///
/// With `margin = None` positive pairs use the raw dot product; with
/// `Some(m)` they use `min(f_i · f_p + m, 1)`. Negatives always use the raw
/// dot product. The loss is summed over anchors; anchors without a positive
/// contribute nothing.
pub fn contrastive_loss_var<T: Real>(
    g: &mut LocalGraph<T>,
    f: Var,
    labels: &[usize],
    tau: T,
    margin: Option<T>,
) -> Result<(Var, ContrastiveStats)> {
    if g.value(f).ndim() != 2 || labels.len() != g.value(f).outer() {
        return Err(crate::error::shape_err(
            "contrastive_loss",
            g.value(f).shape(),
            &[labels.len()],
        ));
    }
    let sims = g.matmul_bt(f, f)?;
    contrastive_from_similarities_var(g, sims, labels, tau, margin)
}

/// Same loss as [`contrastive_loss_var`] taking the `[n, n]` similarity
/// matrix directly. Only the off-diagonal entries are read.
pub fn contrastive_from_similarities_var<T: Real>(
    g: &mut LocalGraph<T>,
    sims: Var,
    labels: &[usize],
    tau: T,
    margin: Option<T>,
) -> Result<(Var, ContrastiveStats)> {
    let n = labels.len();
    if g.value(sims).shape() != [n, n] {
        return Err(crate::error::shape_err(
            "contrastive_from_similarities",
            g.value(sims).shape(),
            &[n, n],
        ));
    }
    let mut pos_mask = vec![false; n * n];
    let mut all_mask = vec![false; n * n];
    let mut weights = vec![T::zero(); n * n];
    let mut stats = ContrastiveStats::default();
    let m = margin.unwrap_or_else(T::zero);
    {
        let s = g.value(sims);
        for k in 0..n {
            let part = partition_indices(labels, k, s.row(k), m)?;
            if !part.has_positives() {
                stats.skipped_anchors += 1;
                continue;
            }
            stats.positive_pairs += part.positives.len();
            if margin.is_some() {
                stats.clamped_pairs += part.clamped.len();
            }
            let w = -T::one() / T::count(part.positives.len());
            for &p in &part.positives {
                pos_mask[k * n + p] = true;
                weights[k * n + p] = w;
            }
            for j in part.all() {
                all_mask[k * n + j] = true;
            }
        }
    }
    let logits = match margin {
        Some(m) => {
            let q = g.add_scalar(sims, m)?;
            let q = g.clamp_max(q, T::one())?;
            g.select(pos_mask, q, sims)?
        }
        None => sims,
    };
    let z = g.scale(logits, T::one() / tau)?;
    let attract = g.weighted_sum(z, weights)?;
    let lse = g.masked_logsumexp_rows(z, all_mask)?;
    let normalizer = g.sum(lse)?;
    Ok((g.add(attract, normalizer)?, stats))
}

/// Loss value from a similarity matrix.
pub fn contrastive_loss_from_similarities<T: Real>(
    sims: &Tensor<T>,
    labels: &[usize],
    tau: T,
    margin: Option<T>,
) -> Result<T> {
    let mut g = LocalGraph::new();
    let s = g.constant(sims.clone());
    let (l, _) = contrastive_from_similarities_var(&mut g, s, labels, tau, margin)?;
    Ok(g.value(l).data()[0])
}

fn scalar_loss<T: Real>(
    f: &Tensor<T>,
    labels: &[usize],
    tau: T,
    margin: Option<T>,
) -> Result<T> {
    let mut g = LocalGraph::new();
    let fv = g.constant(f.clone());
    let (l, _) = contrastive_loss_var(&mut g, fv, labels, tau, margin)?;
    Ok(g.value(l).data()[0])
}

/// Supervised contrastive loss with the positive sum outside the log.
pub fn supervised_contrastive_loss<T: Real>(f: &Tensor<T>, labels: &[usize], tau: T) -> Result<T> {
    scalar_loss(f, labels, tau, None)
}

/// Supervised contrastive loss with positive similarities replaced by
/// `min(a · b + m, 1)`.
pub fn marginal_contrastive_loss<T: Real>(
    f: &Tensor<T>,
    labels: &[usize],
    tau: T,
    margin: T,
) -> Result<T> {
    if !(margin >= T::zero() && margin <= T::lit(2.0)) {
        return Err(Error::Argument(alloc::format!("margin {margin} outside [0, 2]")));
    }
    scalar_loss(f, labels, tau, Some(margin))
}

/// Gradient of the marginal contrastive loss (τ = 1) split by the role
/// `f_k` plays in each anchor's term. `total` is the sum of the four parts.
#[derive(Clone, Debug)]
pub struct MarginalGradient<T> {
    /// `∂L_k/∂f_k`: `f_k` as the anchor.
    pub anchor: Tensor<T>,
    /// `Σ_{i : k ∈ R(i)} ∂L_i/∂f_k`: saturated positives, identically zero.
    pub clamped: Tensor<T>,
    /// `Σ_{i : k ∈ Rᶜ(i)} ∂L_i/∂f_k`.
    pub free: Tensor<T>,
    /// `Σ_{i : k ∈ N(i)} ∂L_i/∂f_k`.
    pub negative: Tensor<T>,
    pub total: Tensor<T>,
}

/// Closed-form gradient of the marginal contrastive loss with τ = 1.
///
/// For anchor `i` let `D_i = e·|R(i)| + Σ_{r ∈ Rᶜ(i)} exp(f_i·f_r + m) + Σ_{n ∈ N(i)} exp(f_i·f_n)`.
/// Then
/// * anchor: `−(1/|P(k)|) Σ_{Rᶜ(k)} f_r + (Σ_{Rᶜ(k)} exp(f_k·f_r + m) f_r + Σ_{N(k)} exp(f_k·f_n) f_n) / D_k`
/// * `k ∈ R(i)`: `0`
/// * `k ∈ Rᶜ(i)`: `(−1/|P(i)| + exp(f_i·f_k + m)/D_i) f_i`
/// * `k ∈ N(i)`: `exp(f_i·f_k)/D_i · f_i`
pub fn marginal_contrastive_grad_analytic<T: Real>(
    f: &Tensor<T>,
    labels: &[usize],
    margin: T,
) -> Result<MarginalGradient<T>> {
    if f.ndim() != 2 || f.shape()[0] != labels.len() {
        return Err(crate::error::shape_err(
            "marginal_contrastive_grad_analytic",
            f.shape(),
            &[labels.len()],
        ));
    }
    let (n, e) = (f.shape()[0], f.shape()[1]);
    let sims = matmul_bt(f, f)?;
    let mut anchor = Tensor::zeros(&[n, e]);
    let mut clamped = Tensor::zeros(&[n, e]);
    let mut free = Tensor::zeros(&[n, e]);
    let mut negative = Tensor::zeros(&[n, e]);
    let econst = T::one().exp();

    let axpy = |dst: &mut Tensor<T>, row: usize, coef: T, src: &[T]| {
        for (d, &s) in dst.data_mut()[row * e..(row + 1) * e].iter_mut().zip(src) {
            *d = *d + coef * s;
        }
    };

    for i in 0..n {
        let s = sims.row(i);
        let part = partition_indices(labels, i, s, margin)?;
        if !part.has_positives() {
            continue;
        }
        let inv_p = T::one() / T::count(part.positives.len());
        let mut denom = econst * T::count(part.clamped.len());
        for &r in &part.free {
            denom = denom + (s[r] + margin).exp();
        }
        for &nn in &part.negatives {
            denom = denom + s[nn].exp();
        }
        let fi = f.row(i);

        // f_i as the anchor.
        for &r in &part.free {
            let coef = -inv_p + (s[r] + margin).exp() / denom;
            axpy(&mut anchor, i, coef, f.row(r));
        }
        for &nn in &part.negatives {
            axpy(&mut anchor, i, s[nn].exp() / denom, f.row(nn));
        }

        // Other rows through anchor i's term. A saturated pair's similarity
        // has zero derivative, so its contribution is scaled by zero.
        for &r in &part.clamped {
            let dq = T::zero();
            let coef = (-inv_p + econst / denom) * dq;
            axpy(&mut clamped, r, coef, fi);
        }
        for &r in &part.free {
            let coef = -inv_p + (s[r] + margin).exp() / denom;
            axpy(&mut free, r, coef, fi);
        }
        for &nn in &part.negatives {
            axpy(&mut negative, nn, s[nn].exp() / denom, fi);
        }
    }

    let mut total = anchor.clone();
    total.add_assign(&clamped);
    total.add_assign(&free);
    total.add_assign(&negative);
    Ok(MarginalGradient {
        anchor,
        clamped,
        free,
        negative,
        total,
    })
}

/// Repeats batch labels for two concatenated views.
pub fn two_view_labels(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(labels.len() * 2);
    out.extend_from_slice(labels);
    out.extend_from_slice(labels);
    out
}

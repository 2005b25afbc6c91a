//! Layer-wise diagnostics: Fisher criterion, R(k) saturation, cosine traces.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::partition_indices;
use crate::real::Real;
use crate::tensor::{dot, matmul_bt, Tensor};

/// Scatter statistics of `N × E` features, all normalized by `N`.
#[derive(Clone, Debug)]
pub struct ScatterSummary {
    pub mean: DVector<f64>,
    /// Row `c` is the mean of class `c` (zero for absent classes).
    pub class_means: DMatrix<f64>,
    pub class_counts: Vec<usize>,
    /// `S_w = Σ_c (1/N) Σ_{i∈c} (f_i − m_c)(f_i − m_c)ᵀ`.
    pub within: DMatrix<f64>,
    /// `S_B = (1/N) Σ_c N_c (m_c − m)(m_c − m)ᵀ`.
    pub between: DMatrix<f64>,
}

impl ScatterSummary {
    pub fn compute<T: Real>(features: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        if features.ndim() != 2 || features.shape()[0] != labels.len() {
            return Err(crate::error::shape_err("scatter", features.shape(), &[labels.len()]));
        }
        let (n, e) = (labels.len(), features.shape()[1]);
        if n < 2 {
            return Err(Error::Argument("scatter needs at least two samples".into()));
        }
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        let x = DMatrix::from_fn(n, e, |i, j| features.data()[i * e + j].as_f64());
        let mut counts = vec![0usize; classes];
        let mut class_means = DMatrix::<f64>::zeros(classes, e);
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..e {
                class_means[(c, j)] += x[(i, j)];
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            if k > 0 {
                for j in 0..e {
                    class_means[(c, j)] /= k as f64;
                }
            }
        }
        let mean = DVector::from_fn(e, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for (i, &c) in labels.iter().enumerate() {
            for j in 0..e {
                centered[(i, j)] -= class_means[(c, j)];
            }
        }
        let within = centered.transpose() * &centered / n as f64;
        let mut between = DMatrix::<f64>::zeros(e, e);
        for (c, &k) in counts.iter().enumerate() {
            if k > 0 {
                let d = class_means.row(c).transpose() - &mean;
                between += (&d * d.transpose()) * (k as f64 / n as f64);
            }
        }
        Ok(ScatterSummary {
            mean,
            class_means,
            class_counts: counts,
            within,
            between,
        })
    }

    /// `Tr{(S_w + ridge·I)⁻¹ S_B}` through a Cholesky solve. Since
    /// `S_B = (1/N) Σ N_c d_c d_cᵀ`, the trace is `(1/N) Σ N_c d_cᵀ S⁻¹ d_c`.
    pub fn fisher(&self, ridge: f64) -> Result<f64> {
        let e = self.mean.len();
        let s = &self.within + DMatrix::<f64>::identity(e, e) * ridge;
        let chol = s.cholesky().ok_or_else(|| {
            Error::Numeric("within-class scatter is not positive definite".into())
        })?;
        let n: usize = self.class_counts.iter().sum();
        let mut tr = 0.0;
        for (c, &k) in self.class_counts.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let d = self.class_means.row(c).transpose() - &self.mean;
            let y = chol.solve(&d);
            tr += k as f64 * d.dot(&y);
        }
        Ok(tr / n as f64)
    }
}

/// Multi-class Fisher criterion `Tr{(S_w + ridge·I)⁻¹ S_B}`.
pub fn fisher_criterion<T: Real>(features: &Tensor<T>, labels: &[usize], ridge: f64) -> Result<f64> {
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Argument("Fisher criterion needs at least two classes".into()));
    }
    ScatterSummary::compute(features, labels)?.fisher(ridge)
}

/// `Σ_k |R(k)| / Σ_k |P(k)|` over unit rows; `None` when no anchor has a
/// positive.
pub fn rk_percentage<T: Real>(f: &Tensor<T>, labels: &[usize], m: T) -> Result<Option<f64>> {
    let sims = matmul_bt(f, f)?;
    let (mut r, mut p) = (0usize, 0usize);
    for k in 0..labels.len() {
        let part = partition_indices(labels, k, sims.row(k), m)?;
        r += part.clamped.len();
        p += part.positives.len();
    }
    Ok((p > 0).then(|| r as f64 / p as f64))
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let den = (na * nb).max(T::lit(1e-12));
    dot(a, b) / den
}

/// Per-layer `(cos(anchor, pos), cos(anchor, neg))` for one sample triple,
/// given each layer's `[N, E]` pooled features.
pub fn cosine_trace<T: Real>(
    anchor: usize,
    pos: usize,
    neg: usize,
    layers: &[Tensor<T>],
) -> Vec<(T, T)> {
    layers
        .iter()
        .map(|f| {
            let a = f.row(anchor);
            (cosine(a, f.row(pos)), cosine(a, f.row(neg)))
        })
        .collect()
}

//! Randomized finite-difference checks of the closed-form marginal
//! contrastive gradient, split by the role a row plays in each anchor term.
//!
//! The reference is a scalar per-anchor loss written independently of the
//! graph engine. For row `k`, each role is differentiated on its own: the
//! anchor part perturbs `f_k` only where it acts as anchor, the other parts
//! perturb `f_k` only inside the terms of anchors that see it as a clamped
//! positive, a free positive or a negative.

use cff_core::losses::{
    marginal_contrastive_grad_analytic, marginal_contrastive_loss, partition_indices,
    supervised_contrastive_loss, two_view_labels,
};
use cff_core::numeric::relative_error;
use cff_core::tensor::matmul_bt;
use cff_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;
/// Instances with a positive pair this close to the clamp boundary are
/// redrawn, so no central difference straddles the kink.
const BOUNDARY_GAP: f64 = 1e-3;
pub const MARGINS: [f64; 3] = [0.0, 0.4, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Anchor,
    Clamped,
    Free,
    Negative,
    Total,
    ZeroMargin,
}

impl Case {
    pub const ALL: [Case; 6] = [
        Case::Anchor,
        Case::Clamped,
        Case::Free,
        Case::Negative,
        Case::Total,
        Case::ZeroMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::Anchor => "anchor",
            Case::Clamped => "clamped positive",
            Case::Free => "free positive",
            Case::Negative => "negative",
            Case::Total => "total",
            Case::ZeroMargin => "zero-margin consistency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub batch: usize,
    pub dim: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: Case,
    pub max_rel_error: f64,
    pub worst: Option<Instance>,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub cases: Vec<CaseResult>,
    /// Non-zero entries found in the analytic clamped part.
    pub clamped_nonzero: usize,
    /// Clamped pairs exercised across all trials.
    pub clamped_pairs: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.clamped_nonzero == 0 && self.cases.iter().all(|c| c.max_rel_error <= TOLERANCE)
    }

    pub fn worst(&self) -> Option<(Case, f64, Instance)> {
        self.cases
            .iter()
            .filter_map(|c| c.worst.map(|w| (c.case, c.max_rel_error, w)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Term of anchor `i` (τ = 1) with its anchor vector replaced by `a` and
/// row `k` replaced by `fk` wherever it appears as a contrast.
fn anchor_term(f: &Tensor<f64>, labels: &[usize], i: usize, a: &[f64], k: usize, fk: &[f64], m: f64) -> f64 {
    let mut attract = 0.0;
    let mut positives = 0usize;
    let mut norm = 0.0;
    for j in 0..labels.len() {
        if j == i {
            continue;
        }
        let row = if j == k { fk } else { f.row(j) };
        let s = dot(a, row);
        let z = if labels[j] == labels[i] {
            positives += 1;
            let q = (s + m).min(1.0);
            attract += q;
            q
        } else {
            s
        };
        norm += z.exp();
    }
    if positives == 0 {
        return 0.0;
    }
    -attract / positives as f64 + norm.ln()
}

fn central(mut g: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|d| {
            let orig = probe[d];
            probe[d] = orig + STEP;
            let up = g(&probe);
            probe[d] = orig - STEP;
            let down = g(&probe);
            probe[d] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Clamped,
    Free,
    Negative,
}

/// Per-role finite-difference gradients `[anchor, clamped, free, negative]`.
fn role_gradients(f: &Tensor<f64>, labels: &[usize], m: f64) -> [Tensor<f64>; 4] {
    let (n, e) = (f.shape()[0], f.shape()[1]);
    let sims = matmul_bt(f, f).expect("square similarity");
    let mut out = [
        Tensor::zeros(&[n, e]),
        Tensor::zeros(&[n, e]),
        Tensor::zeros(&[n, e]),
        Tensor::zeros(&[n, e]),
    ];
    let parts: Vec<_> = (0..n)
        .map(|i| partition_indices(labels, i, sims.row(i), m).expect("valid anchor"))
        .collect();
    for k in 0..n {
        let fk = f.row(k).to_vec();
        let g = central(|a| anchor_term(f, labels, k, a, usize::MAX, &[], m), &fk);
        out[0].data_mut()[k * e..(k + 1) * e].copy_from_slice(&g);
        for (i, part) in parts.iter().enumerate() {
            if i == k || !part.has_positives() {
                continue;
            }
            let role = if part.clamped.contains(&k) {
                Role::Clamped
            } else if part.free.contains(&k) {
                Role::Free
            } else {
                Role::Negative
            };
            let g = central(|x| anchor_term(f, labels, i, f.row(i), k, x, m), &fk);
            let slot = match role {
                Role::Clamped => 1,
                Role::Free => 2,
                Role::Negative => 3,
            };
            for (d, v) in out[slot].data_mut()[k * e..(k + 1) * e].iter_mut().zip(g) {
                *d += v;
            }
        }
    }
    out
}

fn central_full(g: impl Fn(&Tensor<f64>) -> f64, f: &Tensor<f64>) -> Tensor<f64> {
    cff_core::numeric::central_difference(g, f, STEP)
}

fn unit_rows(rng: &mut impl Rng, n: usize, e: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, e], |_| rng.gen_range(-1.0..1.0));
    for r in 0..n {
        let row = &mut t.data_mut()[r * e..(r + 1) * e];
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn near_boundary(f: &Tensor<f64>, labels: &[usize], m: f64) -> bool {
    let s = matmul_bt(f, f).expect("square similarity");
    let n = labels.len();
    (0..n).any(|i| {
        (0..n).any(|j| i != j && labels[i] == labels[j] && (s.row(i)[j] + m - 1.0).abs() <= BOUNDARY_GAP)
    })
}

/// Draws a two-view batch of `2B` unit rows in `E` dimensions. To reach
/// the saturated region at moderate margins, some positive pairs are drawn
/// as small perturbations of each other.
fn draw(rng: &mut ChaCha8Rng, m: f64) -> (Tensor<f64>, Vec<usize>, Instance) {
    loop {
        let b = rng.gen_range(2..=8);
        let e = rng.gen_range(2..=16);
        let classes = rng.gen_range(2..=3);
        let base: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let labels = two_view_labels(&base);
        let mut f = unit_rows(rng, 2 * b, e);
        let tighten = rng.gen_bool(0.5);
        if tighten {
            for r in 0..b {
                let noise: Vec<f64> = (0..e).map(|_| rng.gen_range(-0.2..0.2)).collect();
                let src = f.row(r).to_vec();
                let row = &mut f.data_mut()[(b + r) * e..(b + r + 1) * e];
                for ((d, s), z) in row.iter_mut().zip(src).zip(noise) {
                    *d = s + z;
                }
                let norm = dot(row, row).sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        if !near_boundary(&f, &labels, m) {
            return (f, labels, Instance { batch: b, dim: e, margin: m });
        }
    }
}

fn record(result: &mut CaseResult, err: f64, inst: Instance) {
    result.checked += 1;
    if result.worst.is_none() || err > result.max_rel_error {
        result.max_rel_error = err;
        result.worst = Some(inst);
    }
}

/// Runs `trials` random instances, cycling the margin through
/// `{0, 0.4, 1.0}`.
pub fn run(trials: usize, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<CaseResult> = Case::ALL
        .iter()
        .map(|&case| CaseResult {
            case,
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        })
        .collect();
    let mut clamped_nonzero = 0;
    let mut clamped_pairs = 0;
    for t in 0..trials {
        let m = MARGINS[t % MARGINS.len()];
        let (f, labels, inst) = draw(&mut rng, m);
        let analytic = marginal_contrastive_grad_analytic(&f, &labels, m).expect("valid instance");
        let numeric = role_gradients(&f, &labels, m);
        let parts = [&analytic.anchor, &analytic.clamped, &analytic.free, &analytic.negative];
        for (slot, (a, fd)) in parts.iter().zip(&numeric).enumerate() {
            record(&mut cases[slot], relative_error(a.data(), fd.data(), FLOOR), inst);
        }
        clamped_nonzero += analytic.clamped.data().iter().filter(|&&v| v != 0.0).count();
        let sims = matmul_bt(&f, &f).expect("square similarity");
        clamped_pairs += (0..labels.len())
            .map(|k| partition_indices(&labels, k, sims.row(k), m).expect("valid anchor").clamped.len())
            .sum::<usize>();

        let full = central_full(|x| marginal_contrastive_loss(x, &labels, 1.0, m).expect("valid loss"), &f);
        record(&mut cases[4], relative_error(analytic.total.data(), full.data(), FLOOR), inst);

        if m == 0.0 {
            let sup = central_full(|x| supervised_contrastive_loss(x, &labels, 1.0).expect("valid loss"), &f);
            record(&mut cases[5], relative_error(analytic.total.data(), sup.data(), FLOOR), inst);
        }
    }
    GradcheckReport {
        trials,
        cases,
        clamped_nonzero,
        clamped_pairs,
    }
}

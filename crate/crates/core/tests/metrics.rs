use cff_core::metrics::{fisher_criterion, rk_percentage};
use cff_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clustered(rng: &mut ChaCha8Rng, n: usize, e: usize, classes: usize, sep: f64) -> (Tensor<f64>, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..e).map(|_| rng.gen_range(-1.0..1.0) * sep).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let f = Tensor::from_fn(&[n, e], |k| centers[labels[k / e]][k % e] + rng.gen_range(-1.0..1.0));
    (f, labels)
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, e], |_| rng.gen_range(-1.0..1.0));
    for row in t.data_mut().chunks_exact_mut(e) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(rng: &mut ChaCha8Rng, e: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < e {
        let mut v: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fisher_ignores_sample_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, labels) = clustered(&mut rng, 30, 4, 3, 2.0);
        let mut perm: Vec<usize> = (0..30).collect();
        for i in (1..30).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pf = f.gather_rows(&perm);
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = fisher_criterion(&f, &labels, 1e-6).unwrap();
        let b = fisher_criterion(&pf, &pl, 1e-6).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn fisher_is_rotation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = 3;
        let (f, labels) = clustered(&mut rng, 40, e, 3, 1.5);
        let q = orthogonal(&mut rng, e);
        let rotated = Tensor::<f64>::from_fn(&[40, e], |k| {
            let (i, j) = (k / e, k % e);
            (0..e).map(|c| f.data()[i * e + c] * q[j][c]).sum::<f64>()
        });
        let a = fisher_criterion(&f, &labels, 0.0).unwrap();
        let b = fisher_criterion(&rotated, &labels, 0.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
    }

    #[test]
    fn fisher_grows_with_class_separation(seed in any::<u64>(), step in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let build = |d: f64| {
            Tensor::from_fn(&[20, 2], |k| {
                let (i, j) = (k / 2, k % 2);
                let shift = if j == 0 { if labels[i] == 0 { -d / 2.0 } else { d / 2.0 } } else { 0.0 };
                noise[k] + shift
            })
        };
        let near = fisher_criterion(&build(1.0), &labels, 0.0).unwrap();
        let far = fisher_criterion(&build(1.0 + step), &labels, 0.0).unwrap();
        prop_assert!(far > near);
    }

    #[test]
    fn rk_is_monotone_in_margin(seed in any::<u64>(), m1 in 0.0f64..2.0, m2 in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = unit_rows(&mut rng, 12, 3);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = rk_percentage(&f, &labels, lo).unwrap().unwrap();
        let b = rk_percentage(&f, &labels, hi).unwrap().unwrap();
        prop_assert!(a <= b);
    }
}

#[test]
fn rk_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(2..14);
        let f = unit_rows(&mut rng, n, 4);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let m = rng.gen_range(0.0..1.5);
        let (mut r, mut p) = (0, 0);
        for i in 0..n {
            for j in 0..n {
                if i != j && labels[i] == labels[j] {
                    p += 1;
                    let s: f64 = f.row(i).iter().zip(f.row(j)).map(|(a, b)| a * b).sum();
                    if s + m >= 1.0 {
                        r += 1;
                    }
                }
            }
        }
        let expect = (p > 0).then(|| r as f64 / p as f64);
        assert_eq!(rk_percentage(&f, &labels, m).unwrap(), expect);
    }
}

//! Every graph primitive against central finite differences (f64, step 1e-4).

use cff_core::numeric::{central_difference, relative_error};
use cff_core::{LocalGraph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Keeps entries at least `gap` away from `kink` so a central difference
/// never straddles a non-differentiable point.
fn away_from(t: Tensor<f64>, kink: f64, gap: f64) -> Tensor<f64> {
    t.map(|v| {
        if (v - kink).abs() < gap {
            kink + gap.copysign(v - kink + f64::MIN_POSITIVE)
        } else {
            v
        }
    })
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut LocalGraph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let objective = |xs: &[Tensor<f64>], w: Option<&[f64]>| -> (f64, Vec<f64>) {
        let mut g = LocalGraph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let y = build(&mut g, &vars);
        let n = g.value(y).numel();
        let w = w.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let s = g.weighted_sum(y, w.clone()).unwrap();
        (g.value(s).data()[0], w)
    };
    // Fix a random projection so non-scalar outputs reduce to a scalar.
    let (_, zeros) = objective(&inputs, None);
    let w: Vec<f64> = zeros.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = LocalGraph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let y = build(&mut g, &vars);
    let s = g.weighted_sum(y, w.clone()).unwrap();
    let grads = g.backward(s).unwrap();

    for (i, x) in inputs.iter().enumerate() {
        let numeric = central_difference(
            |probe| {
                let mut xs = inputs.clone();
                xs[i] = probe.clone();
                objective(&xs, Some(&w)).0
            },
            x,
            STEP,
        );
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let err = relative_error(analytic.data(), numeric.data(), 1e-8);
        assert!(err < TOL, "{name} input {i}: relative error {err:e}");
    }
}

#[test]
fn matmul_family() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    check("matmul", vec![uniform(&mut r, &[4, 5]), uniform(&mut r, &[5, 3])], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    check("matmul_bt", vec![uniform(&mut r, &[4, 5]), uniform(&mut r, &[3, 5])], |g, v| {
        g.matmul_bt(v[0], v[1]).unwrap()
    });
    check(
        "batch_matmul",
        vec![uniform(&mut r, &[3, 4, 2]), uniform(&mut r, &[3, 2, 5])],
        |g, v| g.batch_matmul(v[0], v[1], false).unwrap(),
    );
    check(
        "batch_matmul_bt",
        vec![uniform(&mut r, &[3, 4, 2]), uniform(&mut r, &[3, 5, 2])],
        |g, v| g.batch_matmul(v[0], v[1], true).unwrap(),
    );
}

#[test]
fn elementwise_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    check("add", vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4])], |g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    check("add_bias", vec![uniform(&mut r, &[2, 3, 4]), uniform(&mut r, &[4])], |g, v| {
        g.add_bias(v[0], v[1]).unwrap()
    });
    check("add_scalar", vec![uniform(&mut r, &[5])], |g, v| g.add_scalar(v[0], 0.7).unwrap());
    check("scale", vec![uniform(&mut r, &[5])], |g, v| g.scale(v[0], -1.3).unwrap());
    check("relu", vec![away_from(uniform(&mut r, &[4, 4]), 0.0, 1e-2)], |g, v| {
        g.relu(v[0]).unwrap()
    });
    check("gelu", vec![uniform(&mut r, &[4, 4])], |g, v| g.gelu(v[0]).unwrap());
    check("softplus", vec![uniform(&mut r, &[4, 4])], |g, v| g.softplus(v[0]).unwrap());
    check("clamp_max", vec![away_from(uniform(&mut r, &[4, 4]), 0.2, 1e-2)], |g, v| {
        g.clamp_max(v[0], 0.2).unwrap()
    });
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    check("select", vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4])], move |g, v| {
        g.select(mask.clone(), v[0], v[1]).unwrap()
    });
}

#[test]
fn row_reductions_and_normalizers() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    check(
        "layer_norm",
        vec![uniform(&mut r, &[3, 6]), uniform(&mut r, &[6]), uniform(&mut r, &[6])],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
    );
    check("softmax_rows", vec![uniform(&mut r, &[3, 5])], |g, v| g.softmax_rows(v[0]).unwrap());
    check("l2_normalize_rows", vec![uniform(&mut r, &[4, 5])], |g, v| {
        g.l2_normalize_rows(v[0]).unwrap()
    });
    check("sum_squares_rows", vec![uniform(&mut r, &[4, 5])], |g, v| {
        g.sum_squares_rows(v[0]).unwrap()
    });
    let mask: Vec<bool> = (0..20).map(|i| i % 5 != i / 5 && i < 15).collect();
    check("masked_logsumexp_rows", vec![uniform(&mut r, &[4, 5])], move |g, v| {
        g.masked_logsumexp_rows(v[0], mask.clone()).unwrap()
    });
    check("sum", vec![uniform(&mut r, &[3, 2])], |g, v| g.sum(v[0]).unwrap());
    check("cross_entropy", vec![uniform(&mut r, &[4, 3])], |g, v| {
        g.cross_entropy(v[0], vec![0, 2, 1, 2]).unwrap()
    });
}

#[test]
fn structural_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    check("mean_axis0", vec![uniform(&mut r, &[5, 3])], |g, v| g.mean_over_axis(v[0], 0).unwrap());
    check("mean_axis1", vec![uniform(&mut r, &[2, 5, 3])], |g, v| {
        g.mean_over_axis(v[0], 1).unwrap()
    });
    check("concat0", vec![uniform(&mut r, &[2, 3]), uniform(&mut r, &[4, 3])], |g, v| {
        g.concat(v[0], v[1], 0).unwrap()
    });
    check("concat1", vec![uniform(&mut r, &[2, 3, 2]), uniform(&mut r, &[2, 1, 2])], |g, v| {
        g.concat(v[0], v[1], 1).unwrap()
    });
    check("take_index", vec![uniform(&mut r, &[2, 4, 3])], |g, v| {
        g.take_index(v[0], 1, 2).unwrap()
    });
    check("swap_axes12", vec![uniform(&mut r, &[2, 3, 4, 2])], |g, v| {
        g.swap_axes12(v[0]).unwrap()
    });
    check("reshape", vec![uniform(&mut r, &[2, 6])], |g, v| {
        let y = g.reshape(v[0], &[3, 4]).unwrap();
        g.gelu(y).unwrap()
    });
}

#[test]
fn composite_attention_block_with_shared_inputs() {
    // Q = K = V = x exercises gradient accumulation over several paths.
    let mut r = ChaCha8Rng::seed_from_u64(5);
    check("self_attention", vec![uniform(&mut r, &[2, 3, 4])], |g, v| {
        let s = g.batch_matmul(v[0], v[0], true).unwrap();
        let s = g.scale(s, 0.5).unwrap();
        let p = g.softmax_rows(s).unwrap();
        g.batch_matmul(p, v[0], false).unwrap()
    });
}

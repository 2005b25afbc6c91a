use cff_core::models::{
    embed, encoder_layer_forward, EncoderVars, Encoder, ImageShape, LabelMode, MlpSpec,
    ModelSpec, Pooling, VitSpec,
};
use cff_core::numeric::{central_difference, relative_error};
use cff_core::{LocalGraph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Block parameters: LN gains 1, biases 0, everything else from `fill`.
fn block_params(e: usize, mut fill: impl FnMut(&[usize]) -> Tensor<f64>) -> Vec<Tensor<f64>> {
    let ones = Tensor::full(&[e], 1.0);
    let zeros = Tensor::zeros(&[e]);
    vec![
        ones.clone(),
        zeros.clone(),
        fill(&[e, e]),
        fill(&[e]),
        fill(&[e, e]),
        fill(&[e]),
        fill(&[e, e]),
        fill(&[e]),
        fill(&[e, e]),
        fill(&[e]),
        ones,
        zeros,
        fill(&[e, 4 * e]),
        fill(&[4 * e]),
        fill(&[4 * e, e]),
        fill(&[e]),
    ]
}

fn run_block(x: &Tensor<f64>, params: &[Tensor<f64>], heads: usize) -> Tensor<f64> {
    let mut g = LocalGraph::new();
    let xv = g.constant(x.clone());
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let y = encoder_layer_forward(&mut g, xv, &EncoderVars::from_slice(&vars), heads).unwrap();
    g.detach(y)
}

#[test]
fn zero_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&mut rng, &[2, 5, 8], 1.0);
    let params = block_params(8, Tensor::zeros);
    assert_eq!(run_block(&x, &params, 2), x);
}

fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn dense(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..o)
                .map(|c| b.data()[c] + (0..i).map(|r| row[r] * w.data()[r * o + c]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn single_head_block_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = 4;
    let x = uniform(&mut rng, &[1, 2, e], 1.0);
    let params = block_params(e, |s| uniform(&mut rng, s, 0.5));
    let got = run_block(&x, &params, 1);

    let rows: Vec<Vec<f64>> = (0..2).map(|t| x.data()[t * e..(t + 1) * e].to_vec()).collect();
    let h: Vec<Vec<f64>> = rows.iter().map(|r| layer_norm_row(r)).collect();
    let q = dense(&h, &params[2], &params[3]);
    let k = dense(&h, &params[4], &params[5]);
    let v = dense(&h, &params[6], &params[7]);
    let mut attn_out = vec![vec![0.0; e]; 2];
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (0..e).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (e as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        for j in 0..2 {
            for c in 0..e {
                attn_out[i][c] += ex[j] / z * v[j][c];
            }
        }
    }
    let o = dense(&attn_out, &params[8], &params[9]);
    let z: Vec<Vec<f64>> = (0..2)
        .map(|t| (0..e).map(|c| rows[t][c] + o[t][c]).collect())
        .collect();
    let h2: Vec<Vec<f64>> = z.iter().map(|r| layer_norm_row(r)).collect();
    let f1: Vec<Vec<f64>> = dense(&h2, &params[12], &params[13])
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f2 = dense(&f1, &params[14], &params[15]);
    for t in 0..2 {
        for c in 0..e {
            let want = z[t][c] + f2[t][c];
            assert!((got.data()[t * e + c] - want).abs() < 1e-5);
        }
    }
}

#[test]
fn block_is_token_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, e) = (6, 8);
    let x = uniform(&mut rng, &[1, t, e], 1.0);
    let params = block_params(e, |s| uniform(&mut rng, s, 0.3));
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |a: &Tensor<f64>| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| a.data()[p * e..(p + 1) * e].to_vec()).collect();
        Tensor::from_rows(&rows).unwrap().reshape(&[1, t, e]).unwrap()
    };
    let a = permute(&run_block(&x, &params, 2));
    let b = run_block(&permute(&x), &params, 2);
    assert!(relative_error(a.data(), b.data(), 1e-12) < 1e-12);
}

#[test]
fn embedding_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = LocalGraph::<f64>::new();
    let patches = g.constant(Tensor::zeros(&[2, 64, 48]));
    let w = g.constant(uniform(&mut rng, &[48, 128], 1.0));
    let b = g.constant(Tensor::zeros(&[128]));
    let pos0 = g.constant(Tensor::zeros(&[64, 128]));
    let y = embed(&mut g, patches, w, b, pos0, None).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 64, 128]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let same = g.constant(Tensor::full(&[1, 64, 48], 0.5));
    let pos = g.constant(uniform(&mut rng, &[64, 128], 1.0));
    let y = embed(&mut g, same, w, b, pos, None).unwrap();
    let out = g.value(y);
    assert_ne!(&out.data()[..128], &out.data()[128..256]);
    let y = embed(&mut g, same, w, b, pos0, None).unwrap();
    let out = g.value(y);
    assert_eq!(&out.data()[..128], &out.data()[128..256]);
}

#[test]
fn mlp_layer_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = ImageShape {
        channels: 1,
        height: 3,
        width: 4,
    };
    let enc = Encoder::<f32>::init(
        ModelSpec::Mlp(MlpSpec { units: 7, layers: 2 }),
        image,
        LabelMode::None,
        9,
    )
    .unwrap();
    let x = Tensor::from_fn(&[5, 12], |_| rng.gen_range(-1.0f32..1.0));
    let mut g = LocalGraph::new();
    let xv = g.constant(x.clone());
    let out = enc.layer_forward(0, &mut g, xv, false).unwrap();
    let y = g.value(out.out);
    let (w, b) = (&enc.layers[0].tensors()[0], &enc.layers[0].tensors()[1]);
    for r in 0..5 {
        for c in 0..7 {
            let mut acc = 0.0f32;
            for k in 0..12 {
                acc += x.data()[r * 12 + k] * w.data()[k * 7 + c];
            }
            let want = (acc + b.data()[c]).max(0.0);
            assert!((y.data()[r * 7 + c] - want).abs() < 1e-6);
        }
    }
}

/// Finite-difference check of every parameter of layer `l` through a random
/// projection of its pooled output.
fn check_layer(enc: &Encoder<f64>, l: usize, input: &Tensor<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = |enc: &Encoder<f64>, w: &[f64]| -> f64 {
        let mut g = LocalGraph::new();
        let x = g.constant(input.clone());
        let out = enc.layer_forward(l, &mut g, x, false).unwrap();
        let s = g.weighted_sum(out.pooled, w.to_vec()).unwrap();
        g.value(s).data()[0]
    };
    let mut g = LocalGraph::new();
    let x = g.constant(input.clone());
    let out = enc.layer_forward(l, &mut g, x, true).unwrap();
    let w: Vec<f64> = (0..g.value(out.pooled).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = g.weighted_sum(out.pooled, w.clone()).unwrap();
    let mut grads = g.backward(s).unwrap();
    for (i, &pv) in out.params.iter().enumerate() {
        let analytic = grads.take(pv).unwrap();
        let numeric = central_difference(
            |probe| {
                let mut e2 = enc.clone();
                e2.layers[l].tensors_mut()[i] = probe.clone();
                objective(&e2, &w)
            },
            &enc.layers[l].tensors()[i],
            1e-5,
        );
        let err = relative_error(analytic.data(), numeric.data(), 1e-6);
        assert!(err < 1e-3, "layer {l} tensor {} rel err {err:e}", enc.layers[l].names()[i]);
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = ImageShape {
        channels: 2,
        height: 4,
        width: 4,
    };
    for pooling in [Pooling::Mean, Pooling::ClassToken] {
        let spec = VitSpec {
            embed_dim: 8,
            heads: 2,
            layers: 2,
            patch_h: 2,
            patch_w: 2,
            pooling,
        };
        let mut enc = Encoder::<f64>::init(ModelSpec::Vit(spec), image, LabelMode::None, 3).unwrap();
        // Larger weights than the default init so every path carries signal.
        for layer in &mut enc.layers {
            for t in layer.tensors_mut() {
                *t = t.map(|v| v * 10.0 + 0.05);
            }
        }
        let imgs = uniform(&mut rng, &[2, 2, 4, 4], 1.0);
        let x0 = enc.prepare_input(&imgs, None).unwrap();
        check_layer(&enc, 0, &x0, 7);
        let tokens = 4 + usize::from(pooling == Pooling::ClassToken);
        check_layer(&enc, 1, &uniform(&mut rng, &[2, tokens, 8], 1.0), 8);
    }

    let image = ImageShape {
        channels: 1,
        height: 2,
        width: 3,
    };
    let enc = Encoder::<f64>::init(
        ModelSpec::Mlp(MlpSpec { units: 5, layers: 2 }),
        image,
        LabelMode::Patch(2),
        4,
    )
    .unwrap();
    check_layer(&enc, 0, &uniform(&mut rng, &[3, 8], 1.0), 9);
    check_layer(&enc, 1, &uniform(&mut rng, &[3, 5], 1.0), 10);
}

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use cff_core::data::{Dataset, Split};
use cff_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// MNIST-shaped images: a bright 4x4 block whose position encodes the
/// class, on uniform noise.
pub fn synthetic_pixels(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen_range(0..10u8);
        let (r0, c0) = (2 + 5 * (y as usize / 5) * 2, 2 + 5 * (y as usize % 5));
        for r in 0..28 {
            for c in 0..28 {
                let on = (r0..r0 + 4).contains(&r) && (c0..c0 + 4).contains(&c);
                let noise: u8 = rng.gen_range(0..60);
                pixels.push(if on { 255 - noise } else { noise });
            }
        }
        labels.push(y);
    }
    (pixels, labels)
}

pub fn synthetic_mnist(n: usize, seed: u64, split: Split) -> Dataset {
    let (px, lb) = synthetic_pixels(n, seed);
    let images = Tensor::new(vec![n, 1, 28, 28], px.iter().map(|&b| f32::from(b) / 255.0).collect()).unwrap();
    Dataset::new(images, lb.iter().map(|&l| l as usize).collect(), 10, split).unwrap()
}

fn idx(dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

/// Writes `root/mnist/` with synthetic train and test IDX files.
pub fn write_mnist(root: &Path, train: usize, test: usize) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    for (prefix, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let (px, lb) = synthetic_pixels(n, seed);
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx(&[n as u32, 28, 28], &px)).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx(&[n as u32], &lb)).unwrap();
    }
}

/// A small config for the synthetic data in TOML.
pub fn tiny_config(algorithm: &str, extra: &str) -> String {
    format!(
        r#"name = "tiny"
algorithm = "{algorithm}"
dataset = "mnist"
epochs = 2
batch_size = 32
seed = 3
{extra}

[model]
kind = "mlp"
units = 24
layers = 2

[head]
epochs = 2
batch_size = 64

[diagnostics]
fisher_samples = 100
"#
    )
}

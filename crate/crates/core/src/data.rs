//! In-memory datasets and the transforms applied before training: seeded
//! splits, label noise, subsampling, normalization and augmentation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ImageShape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images in `[0, 1]`, shape `[N, c, H, W]`, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(crate::error::shape_err("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(alloc::format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape {
            channels: s[1],
            height: s[2],
            width: s[3],
        }
    }

    /// Examples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn ceil_count(fraction: f64, n: usize) -> usize {
    let c = num_traits::Float::ceil(fraction * n as f64 - 1e-9);
    (c.max(0.0) as usize).min(n)
}

/// Seeded shuffle; the first `⌈fraction·N⌉` examples become validation.
/// Both parts keep their original relative order.
pub fn split_validation(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Argument(alloc::format!("validation fraction {fraction} outside [0, 1)")));
    }
    let idx = shuffled(train.len(), seed);
    let n_val = ceil_count(fraction, train.len());
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut rest: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    rest.sort_unstable();
    Ok((train.subset(&rest, Split::Train), train.subset(&val, Split::Val)))
}

/// Relabels exactly `⌈p·N⌉` seeded-chosen examples with a different class
/// drawn uniformly from the other `C − 1`.
pub fn inject_label_noise(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(alloc::format!("noise fraction {p} outside [0, 1]")));
    }
    if ds.classes < 2 && p > 0.0 {
        return Err(Error::Argument("label noise needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    let mut out = ds.clone();
    for &i in &idx[..ceil_count(p, ds.len())] {
        let shift = rng.gen_range(1..ds.classes);
        out.labels[i] = (ds.labels[i] + shift) % ds.classes;
    }
    Ok(out)
}

/// Keeps `⌈keep·N⌉` seeded-chosen examples in their original order.
pub fn subsample(ds: &Dataset, keep: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&keep) {
        return Err(Error::Argument(alloc::format!("keep fraction {keep} outside [0, 1]")));
    }
    let mut idx = shuffled(ds.len(), seed);
    idx.truncate(ceil_count(keep, ds.len()));
    idx.sort_unstable();
    Ok(ds.subset(&idx, ds.split))
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Statistics of `ds` computed in f64.
    pub fn fit(ds: &Dataset) -> Self {
        let s = ds.images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                let start = (i * c + ch) * hw;
                for &v in &ds.images.data()[start..start + hw] {
                    sum += f64::from(v);
                    sq += f64::from(v) * f64::from(v);
                }
            }
            let count = (n * hw).max(1) as f64;
            let m = sum / count;
            let var = (sq / count - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = num_traits::Float::sqrt(var).max(1e-6) as f32;
        }
        Normalization { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, images: &Tensor<f32>) -> Tensor<f32> {
        let s = images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (k / hw) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub horizontal_flip: bool,
    pub random_crop: bool,
    /// Zero padding on each side before cropping.
    pub pad: usize,
}

impl AugmentationPolicy {
    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && (!self.random_crop || self.pad == 0)
    }
}

/// Mirrors one `[c, H, W]` image left to right in place.
pub fn flip_horizontal(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Zero-pads by `pad` and cuts the original-size window at `(dy, dx)` of
/// the padded image.
pub fn crop_padded(img: &[f32], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y + dy;
            if sy < pad || sy >= pad + h {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < pad || sx >= pad + w {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy - pad) * w + sx - pad];
            }
        }
    }
    out
}

/// One independently augmented view of `[B, c, H, W]` images.
pub fn augment(batch: &Tensor<f32>, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Tensor<f32> {
    if policy.is_identity() {
        return batch.clone();
    }
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let mut out = Vec::with_capacity(batch.numel());
    for i in 0..b {
        let mut img = batch.data()[i * per..(i + 1) * per].to_vec();
        if policy.random_crop && policy.pad > 0 {
            let dy = rng.gen_range(0..=2 * policy.pad);
            let dx = rng.gen_range(0..=2 * policy.pad);
            img = crop_padded(&img, c, h, w, policy.pad, dy, dx);
        }
        if policy.horizontal_flip && rng.gen_bool(0.5) {
            flip_horizontal(&mut img, c, h, w);
        }
        out.extend_from_slice(&img);
    }
    Tensor::new(s.to_vec(), out).expect("same shape as input")
}

pub fn two_views(
    batch: &Tensor<f32>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Tensor<f32>) {
    let a = augment(batch, policy, rng);
    let b = augment(batch, policy, rng);
    (a, b)
}

/// Splits `0..n` into batches of `size` (the last may be short), shuffled
/// when an RNG is given.
pub fn batch_indices(n: usize, size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        idx.shuffle(r);
    }
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

//! Classification heads on frozen encoders and the two inference modes.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_indices, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::graph::LocalGraph;
use crate::losses::{cross_entropy, goodness};
use crate::models::{head_forward, Encoder, Head, LabelMode, LabelPatchTable};
use crate::optim::AdamW;
use crate::tensor::Tensor;

use super::{FeatureSet, HeadConfig};

/// Counts full encoder forward passes, one per sample per pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub passes: u64,
    pub samples: u64,
}

impl PassCounter {
    pub fn passes_per_sample(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.passes as f64 / self.samples as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadReport {
    /// 1-based epoch with the lowest validation cross-entropy.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn normalize_rows(t: &mut Tensor<f32>) {
    let e = t.last_dim();
    for row in t.data_mut().chunks_exact_mut(e) {
        let n = num_traits::Float::sqrt(row.iter().map(|v| v * v).sum::<f32>()).max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
}

fn chunks(n: usize, batch: usize) -> impl Iterator<Item = core::ops::Range<usize>> {
    let batch = batch.max(1);
    (0..n.div_ceil(batch)).map(move |i| i * batch..((i + 1) * batch).min(n))
}

fn image_rows(images: &Tensor<f32>, range: core::ops::Range<usize>) -> Result<Tensor<f32>> {
    Ok(images.slice_rows(range.start, range.end))
}

fn head_input(encoder: &Encoder<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    match encoder.label_mode {
        LabelMode::None => encoder.prepare_input(images, None),
        LabelMode::Patch(w) => encoder.prepare_input(images, Some(&Tensor::zeros(&[images.shape()[0], w]))),
    }
}

/// Row-normalized pooled output of the last layer for normalized
/// `[N, c, H, W]` images.
pub fn final_layer_features(
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    normalize_between: bool,
    batch: usize,
    counter: &mut PassCounter,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for r in chunks(n, batch) {
        let x = head_input(encoder, &image_rows(images, r)?)?;
        let mut pooled = encoder.pooled_outputs(&x, normalize_between)?;
        let mut last = pooled.pop().expect("encoder has layers");
        normalize_rows(&mut last);
        parts.push(last);
    }
    counter.passes += n as u64;
    counter.samples += n as u64;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Concatenated row-normalized pooled outputs of layers `2..=L` with the
/// all-zero label patch: the one-pass input of an FF head.
pub fn ff_onepass_features(
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    batch: usize,
    counter: &mut PassCounter,
) -> Result<Tensor<f32>> {
    let layers = encoder.num_layers();
    if layers < 2 {
        return Err(Error::Config("the one-pass FF head needs at least two layers".into()));
    }
    if encoder.label_mode == LabelMode::None {
        return Err(Error::Config("the one-pass FF head needs a label-patch encoder".into()));
    }
    let n = images.shape()[0];
    let e = encoder.width();
    let mut out = Vec::with_capacity(n * (layers - 1) * e);
    for r in chunks(n, batch) {
        let x = head_input(encoder, &image_rows(images, r.clone())?)?;
        let mut pooled = encoder.pooled_outputs(&x, true)?;
        pooled.iter_mut().for_each(normalize_rows);
        for i in 0..r.len() {
            for p in &pooled[1..] {
                out.extend_from_slice(p.row(i));
            }
        }
    }
    counter.passes += n as u64;
    counter.samples += n as u64;
    Tensor::new(vec![n, (layers - 1) * e], out)
}

/// Cross-entropy training of a zero-initialised linear head, keeping the
/// epoch with the lowest validation cross-entropy.
pub fn train_head(
    train: &FeatureSet,
    val: &FeatureSet,
    classes: usize,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<(Head<f32>, HeadReport)> {
    let width = train.features.last_dim();
    if val.features.last_dim() != width {
        return Err(crate::error::shape_err("train_head", train.features.shape(), val.features.shape()));
    }
    let zero = Head::<f32>::zeros(width, classes);
    let mut params = [zero.w.clone(), zero.b.clone()];
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (f64::INFINITY, zero);
    let mut report = HeadReport::default();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in batch_indices(train.labels.len(), cfg.batch_size, Some(&mut rng)) {
            let x = train.features.gather_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = LocalGraph::new();
            let xv = g.constant(x);
            let w = g.param(params[0].clone());
            let b = g.param(params[1].clone());
            let logits = head_forward(&mut g, xv, w, b)?;
            let loss = g.cross_entropy(logits, y)?;
            total += g.value(loss).data()[0] as f64 * idx.len() as f64;
            let mut grads = g.backward(loss)?;
            let gw = grads.take(w).unwrap_or_else(|| Tensor::zeros(params[0].shape()));
            let gb = grads.take(b).unwrap_or_else(|| Tensor::zeros(params[1].shape()));
            opt.step(&mut params, &[gw, gb])?;
        }
        let head = Head {
            w: params[0].clone(),
            b: params[1].clone(),
        };
        report.train_loss.push(total / train.labels.len().max(1) as f64);
        let v = cross_entropy(&head.forward(&val.features)?, &val.labels)? as f64;
        report.val_loss.push(v);
        if v < best.0 {
            best = (v, head);
            report.best_epoch = epoch;
        }
    }
    Ok((best.1, report))
}

/// Stage 2 of contrastive training: the encoder is only borrowed, so its
/// parameters and optimizer state cannot change.
#[allow(clippy::too_many_arguments)]
pub fn train_head_stage2(
    encoder: &Encoder<f32>,
    train: &Dataset,
    val: &Dataset,
    norm: &Normalization,
    normalize_between: bool,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<(Head<f32>, HeadReport)> {
    let mut counter = PassCounter::default();
    let ft = FeatureSet {
        features: final_layer_features(encoder, &norm.apply(&train.images), normalize_between, 500, &mut counter)?,
        labels: train.labels.clone(),
    };
    let fv = FeatureSet {
        features: final_layer_features(encoder, &norm.apply(&val.images), normalize_between, 500, &mut counter)?,
        labels: val.labels.clone(),
    };
    train_head(&ft, &fv, train.classes, cfg, seed)
}

/// One-pass head of an FF/SymBa encoder over layers `2..=L`.
pub fn train_ff_onepass_head(
    encoder: &Encoder<f32>,
    train: &Dataset,
    val: &Dataset,
    norm: &Normalization,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<(Head<f32>, HeadReport)> {
    let mut counter = PassCounter::default();
    let ft = FeatureSet {
        features: ff_onepass_features(encoder, &norm.apply(&train.images), 500, &mut counter)?,
        labels: train.labels.clone(),
    };
    let fv = FeatureSet {
        features: ff_onepass_features(encoder, &norm.apply(&val.images), 500, &mut counter)?,
        labels: val.labels.clone(),
    };
    train_head(&ft, &fv, train.classes, cfg, seed)
}

/// `[N, C]` summed goodness of every layer for every candidate label; one
/// encoder pass per candidate, so `C` passes per sample.
pub fn predict_goodness(
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    table: &LabelPatchTable<f32>,
    batch: usize,
    counter: &mut PassCounter,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let c = table.classes();
    let mut scores = vec![0.0f32; n * c];
    for r in chunks(n, batch) {
        let imgs = image_rows(images, r.clone())?;
        for label in 0..c {
            let labels = vec![label; r.len()];
            let x = encoder.prepare_input(&imgs, Some(&table.rows(Some(&labels), r.len())?))?;
            counter.passes += r.len() as u64;
            for pooled in encoder.pooled_outputs(&x, true)? {
                for i in 0..r.len() {
                    scores[(r.start + i) * c + label] += goodness(pooled.row(i));
                }
            }
        }
    }
    counter.samples += n as u64;
    Tensor::new(vec![n, c], scores)
}

/// Head logits for normalized images, one encoder pass per sample.
pub fn predict_head(
    encoder: &Encoder<f32>,
    head: &Head<f32>,
    images: &Tensor<f32>,
    normalize_between: bool,
    batch: usize,
    counter: &mut PassCounter,
) -> Result<Tensor<f32>> {
    let features = match encoder.label_mode {
        LabelMode::None => final_layer_features(encoder, images, normalize_between, batch, counter)?,
        LabelMode::Patch(_) => ff_onepass_features(encoder, images, batch, counter)?,
    };
    head.forward(&features)
}

/// Fraction of rows whose true class ranks among the `k` largest scores.
/// Equal scores rank by class index, so at `k = 1` a tie goes to the lowest
/// index.
pub fn top_k_accuracy(scores: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    if scores.ndim() != 2 || scores.shape()[0] != labels.len() {
        return Err(crate::error::shape_err("top_k_accuracy", scores.shape(), &[labels.len()]));
    }
    let c = scores.shape()[1];
    if k == 0 || k > c {
        return Err(Error::Argument(alloc::format!("k = {k} outside [1, {c}]")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Argument(alloc::format!("label {y} outside [0, {c})")));
        }
        let row = scores.row(i);
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > row[y] || (s == row[y] && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn top_k_examples() {
        let s = Tensor::from_rows(&[vec![0.1f32, 0.7, 0.2], vec![0.5, 0.3, 0.2]]).unwrap();
        assert_eq!(top_k_accuracy(&s, &[1, 0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[2, 2], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&s, &[2, 1], 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[2, 2], 3).unwrap(), 1.0);
        assert!(top_k_accuracy(&s, &[0, 0], 4).is_err());
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let s = Tensor::from_rows(&[vec![1.0f32, 1.0, 0.0]]).unwrap();
        assert_eq!(top_k_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn random_scores_hit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let s = Tensor::from_fn(&[n, 10], |_| rng.gen::<f32>());
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let acc = top_k_accuracy(&s, &labels, 1).unwrap();
        // Binomial(20000, 0.1) has standard deviation ≈ 0.0021.
        assert!((acc - 0.1).abs() < 0.01, "{acc}");
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
            let features = Tensor::from_fn(&[n, 6], |k| {
                let (i, j) = (k / 6, k % 6);
                let on = if j == labels[i] { 2.0 } else { 0.0 };
                on + rng.gen_range(-0.3f32..0.3)
            });
            FeatureSet { features, labels }
        };
        let train = make(&mut rng, 400);
        let val = make(&mut rng, 100);
        let cfg = HeadConfig {
            epochs: 30,
            batch_size: 32,
            ..HeadConfig::default()
        };
        let (head, report) = train_head(&train, &val, 4, &cfg, 1).unwrap();
        assert_eq!((head.features(), head.classes()), (6, 4));
        let acc = top_k_accuracy(&head.forward(&train.features).unwrap(), &train.labels, 1).unwrap();
        assert!(acc > 0.995, "{acc}");
        assert!(report.best_epoch >= 1 && report.val_loss.len() == 30);
    }
}

//! One local update of one layer, and the per-batch loops built on it.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, LocalGraph, Var};
use crate::losses::{contrastive_loss_var, ff_loss_var, symba_loss_var, ContrastiveStats};
use crate::models::{Encoder, LabelPatchTable, LayerParams};
use crate::optim::AdamW;
use crate::tensor::Tensor;

/// Outcome of one layer's local update.
#[derive(Clone, Debug)]
pub struct LayerStep {
    pub loss: f32,
    pub stats: ContrastiveStats,
    /// Detached input for the next layer.
    pub next: Tensor<f32>,
}

/// The goodness objective of an FF-style layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GoodnessLoss {
    Ff { theta: f32 },
    SymBa { alpha: f32 },
}

fn collect_grads(grads: &mut Gradients<f32>, params: &[Var], layer: &LayerParams<f32>) -> Vec<Tensor<f32>> {
    params
        .iter()
        .zip(layer.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn next_input(g: &mut LocalGraph<f32>, out: Var, normalize: bool) -> Result<Tensor<f32>> {
    if normalize {
        let n = g.l2_normalize_rows(out)?;
        Ok(g.detach(n))
    } else {
        Ok(g.detach(out))
    }
}

/// Records the contrastive objective of one layer and returns its
/// parameter gradients without stepping.
pub fn cff_layer_gradients(
    layer: &LayerParams<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    tau: f32,
    margin: Option<f32>,
    normalize_next: bool,
) -> Result<(LayerStep, Vec<Tensor<f32>>)> {
    let mut g = LocalGraph::new();
    let x = g.constant(input.clone());
    let out = layer.forward(&mut g, x, true)?;
    let f = g.l2_normalize_rows(out.pooled)?;
    let (loss, stats) = contrastive_loss_var(&mut g, f, labels, tau, margin)?;
    let next = next_input(&mut g, out.out, normalize_next)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads = collect_grads(&mut grads, &out.params, layer);
    Ok((
        LayerStep {
            loss: value,
            stats,
            next,
        },
        grads,
    ))
}

/// Local contrastive update of one layer: forward, pooled and row-normalized
/// representations, (marginal) contrastive loss, local backward, AdamW step.
/// The returned `next` is the detached un-normalized output unless
/// `normalize_next` is set.
pub fn cff_layer_step(
    layer: &mut LayerParams<f32>,
    opt: &mut AdamW<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    tau: f32,
    margin: Option<f32>,
    normalize_next: bool,
) -> Result<LayerStep> {
    let (step, grads) = cff_layer_gradients(layer, input, labels, tau, margin, normalize_next)?;
    opt.step(layer.tensors_mut(), &grads)?;
    Ok(step)
}

/// FF objective on `input = [positives; negatives]` (first half positive),
/// returning the gradients without stepping. `next` is row-normalized.
pub fn ff_layer_gradients(
    layer: &LayerParams<f32>,
    input: &Tensor<f32>,
    loss: GoodnessLoss,
) -> Result<(LayerStep, Vec<Tensor<f32>>)> {
    let rows = input.shape()[0];
    if !rows.is_multiple_of(2) {
        return Err(Error::Argument("FF input must stack positives and negatives".into()));
    }
    let b = rows / 2;
    let mut g = LocalGraph::new();
    let x = g.constant(input.clone());
    let out = layer.forward(&mut g, x, true)?;
    let good = g.sum_squares_rows(out.pooled)?;
    let good = g.reshape(good, &[2, b])?;
    let pos = g.take_index(good, 0, 0)?;
    let neg = g.take_index(good, 0, 1)?;
    let l = match loss {
        GoodnessLoss::Ff { theta } => ff_loss_var(&mut g, pos, neg, theta)?,
        GoodnessLoss::SymBa { alpha } => symba_loss_var(&mut g, pos, neg, alpha)?,
    };
    let next = next_input(&mut g, out.out, true)?;
    let value = g.value(l).data()[0];
    let mut grads = g.backward(l)?;
    let grads = collect_grads(&mut grads, &out.params, layer);
    Ok((
        LayerStep {
            loss: value,
            stats: ContrastiveStats::default(),
            next,
        },
        grads,
    ))
}

pub fn ff_layer_step(
    layer: &mut LayerParams<f32>,
    opt: &mut AdamW<f32>,
    input: &Tensor<f32>,
    loss: GoodnessLoss,
) -> Result<LayerStep> {
    let (step, grads) = ff_layer_gradients(layer, input, loss)?;
    opt.step(layer.tensors_mut(), &grads)?;
    Ok(step)
}

/// Settings shared by every layer of a contrastive batch update.
#[derive(Clone, Debug)]
pub struct CffBatchConfig {
    pub tau: f32,
    /// Per-layer margins; `None` trains plain CFF.
    pub margins: Option<Vec<f32>>,
    pub normalize_between: bool,
}

/// First-layer input and row labels for a contrastive batch: every view is
/// stacked along the batch axis and the labels are repeated per view.
pub fn contrastive_input(
    encoder: &Encoder<f32>,
    views: &[&Tensor<f32>],
    labels: &[usize],
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let stacked = Tensor::concat_rows(views)?;
    let x = encoder.prepare_input(&stacked, None)?;
    let mut rows = Vec::with_capacity(labels.len() * views.len());
    for _ in views {
        rows.extend_from_slice(labels);
    }
    Ok((x, rows))
}

/// One contrastive update of every layer in order on a prepared input.
pub fn train_cff_batch(
    encoder: &mut Encoder<f32>,
    optimizers: &mut [AdamW<f32>],
    input: Tensor<f32>,
    labels: &[usize],
    cfg: &CffBatchConfig,
) -> Result<Vec<LayerStep>> {
    let mut x = input;
    let mut steps = Vec::with_capacity(encoder.layers.len());
    for (l, (layer, opt)) in encoder.layers.iter_mut().zip(optimizers.iter_mut()).enumerate() {
        let margin = cfg.margins.as_ref().map(|m| m[l]);
        let step = cff_layer_step(layer, opt, &x, labels, cfg.tau, margin, cfg.normalize_between)?;
        x = step.next.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// A wrong label for each sample, uniform over the other classes.
pub fn wrong_labels(labels: &[usize], classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    labels
        .iter()
        .map(|&y| (y + rng.gen_range(1..classes)) % classes)
        .collect()
}

/// `[positives; negatives]` first-layer input for FF.
pub fn ff_input(
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    wrong: &[usize],
    table: &LabelPatchTable<f32>,
) -> Result<Tensor<f32>> {
    let b = labels.len();
    let pos = encoder.prepare_input(images, Some(&table.rows(Some(labels), b)?))?;
    let neg = encoder.prepare_input(images, Some(&table.rows(Some(wrong), b)?))?;
    Tensor::concat_rows(&[&pos, &neg])
}

/// One FF (or SymBa) update of every layer in order.
pub fn train_ff_batch(
    encoder: &mut Encoder<f32>,
    optimizers: &mut [AdamW<f32>],
    input: Tensor<f32>,
    loss: GoodnessLoss,
) -> Result<Vec<LayerStep>> {
    let mut x = input;
    let mut steps = Vec::with_capacity(encoder.layers.len());
    for (layer, opt) in encoder.layers.iter_mut().zip(optimizers.iter_mut()) {
        let step = ff_layer_step(layer, opt, &x, loss)?;
        x = step.next.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// The local objective shared by every layer of an encoder.
#[derive(Clone, Debug)]
pub enum LayerObjective {
    Contrastive(CffBatchConfig),
    Goodness(GoodnessLoss),
}

/// Parameter gradients of every layer on one prepared batch, in layer order,
/// without updating anything. Each layer sees its predecessor's detached
/// output.
pub fn encoder_gradients(
    encoder: &Encoder<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    objective: &LayerObjective,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    let mut x = input.clone();
    let mut out = Vec::with_capacity(encoder.layers.len());
    for (l, layer) in encoder.layers.iter().enumerate() {
        let (step, grads) = match objective {
            LayerObjective::Contrastive(cfg) => {
                let margin = cfg.margins.as_ref().map(|m| m[l]);
                cff_layer_gradients(layer, &x, labels, cfg.tau, margin, cfg.normalize_between)?
            }
            LayerObjective::Goodness(loss) => ff_layer_gradients(layer, &x, *loss)?,
        };
        x = step.next;
        out.push(grads);
    }
    Ok(out)
}

/// Loss of every layer on a batch without updating anything.
pub fn evaluate_cff_batch(
    encoder: &Encoder<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    cfg: &CffBatchConfig,
) -> Result<Vec<(f32, ContrastiveStats, Tensor<f32>)>> {
    let mut x = input.clone();
    let mut out = Vec::with_capacity(encoder.layers.len());
    for (l, layer) in encoder.layers.iter().enumerate() {
        let margin = cfg.margins.as_ref().map(|m| m[l]);
        let mut g = LocalGraph::new();
        let xv = g.constant(x);
        let o = layer.forward(&mut g, xv, false)?;
        let f = g.l2_normalize_rows(o.pooled)?;
        let (loss, stats) = contrastive_loss_var(&mut g, f, labels, cfg.tau, margin)?;
        x = next_input(&mut g, o.out, cfg.normalize_between)?;
        out.push((g.value(loss).data()[0], stats, g.detach(f)));
    }
    Ok(out)
}

/// FF loss of every layer on `[positives; negatives]` without updating.
pub fn evaluate_ff_batch(encoder: &Encoder<f32>, input: &Tensor<f32>, loss: GoodnessLoss) -> Result<Vec<f32>> {
    let b = input.shape()[0] / 2;
    let mut x = input.clone();
    let mut out = Vec::with_capacity(encoder.layers.len());
    for layer in &encoder.layers {
        let mut g = LocalGraph::new();
        let xv = g.constant(x);
        let o = layer.forward(&mut g, xv, false)?;
        let good = g.sum_squares_rows(o.pooled)?;
        let good = g.reshape(good, &[2, b])?;
        let pos = g.take_index(good, 0, 0)?;
        let neg = g.take_index(good, 0, 1)?;
        let l = match loss {
            GoodnessLoss::Ff { theta } => ff_loss_var(&mut g, pos, neg, theta)?,
            GoodnessLoss::SymBa { alpha } => symba_loss_var(&mut g, pos, neg, alpha)?,
        };
        out.push(g.value(l).data()[0]);
        x = next_input(&mut g, o.out, true)?;
    }
    Ok(out)
}

//! MLP and ViT encoders split into independently trained layers, label
//! patches for FF, pooling, and the linear classifier head.

mod init;
mod params;
mod vit;

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LocalGraph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub use init::{truncated_normal, uniform_fan_in};
pub use params::{LayerKind, LayerParams};
pub use vit::{embed, encoder_layer_forward, patchify, unpatchify, EncoderVars};

/// Shape of one input image, channel-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// `MLP[E L]`: `L` affine + ReLU layers of width `E`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub units: usize,
    pub layers: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average over tokens.
    #[default]
    Mean,
    /// Prepend a learned class token and read it out.
    ClassToken,
}

/// `ViT[E H L]` over `patch × patch` tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl VitSpec {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self, image: ImageShape) -> usize {
        self.patch_h * self.patch_w * image.channels
    }

    pub fn num_patches(&self, image: ImageShape) -> Result<usize> {
        if self.patch_h == 0
            || self.patch_w == 0
            || !image.height.is_multiple_of(self.patch_h)
            || !image.width.is_multiple_of(self.patch_w)
        {
            return Err(Error::Config(alloc::format!(
                "{}x{} image is not divisible into {}x{} patches",
                image.height,
                image.width,
                self.patch_h,
                self.patch_w
            )));
        }
        Ok((image.height / self.patch_h) * (image.width / self.patch_w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Vit(VitSpec),
}

impl ModelSpec {
    pub fn layers(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.layers,
            ModelSpec::Vit(s) => s.layers,
        }
    }

    /// Width of each layer's pooled output.
    pub fn width(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.units,
            ModelSpec::Vit(s) => s.embed_dim,
        }
    }

    pub fn validate(&self, image: ImageShape) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => {
                if s.units == 0 || s.layers == 0 {
                    return Err(Error::Config("model: MLP needs units >= 1 and layers >= 1".into()));
                }
            }
            ModelSpec::Vit(s) => {
                if s.embed_dim == 0 || s.layers == 0 || s.heads == 0 {
                    return Err(Error::Config("model: ViT needs positive embed_dim, heads, layers".into()));
                }
                if s.embed_dim % s.heads != 0 {
                    return Err(Error::Config(alloc::format!(
                        "model: embed_dim {} is not divisible by {} heads",
                        s.embed_dim,
                        s.heads
                    )));
                }
                s.num_patches(image)?;
            }
        }
        Ok(())
    }
}

/// Fixed per-class label vectors. For a ViT each row is one patch; for an
/// MLP each row is concatenated to the flattened image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPatchTable<T> {
    table: Tensor<T>,
}

impl<T: Real> LabelPatchTable<T> {
    /// Standard-normal entries drawn once from `seed`.
    pub fn random(classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = init::normal(&mut rng, &[classes, width], 1.0);
        LabelPatchTable { table }
    }

    /// `C × C` identity: plain one-hot label vectors.
    pub fn one_hot(classes: usize) -> Self {
        LabelPatchTable {
            table: Tensor::identity(classes),
        }
    }

    pub fn from_tensor(table: Tensor<T>) -> Result<Self> {
        if table.ndim() != 2 || table.shape()[0] < 2 {
            return Err(crate::error::shape_err("label table", table.shape(), &[2]));
        }
        Ok(LabelPatchTable { table })
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn patch(&self, label: usize) -> Result<&[T]> {
        if label >= self.classes() {
            return Err(Error::Argument(alloc::format!(
                "label {label} outside [0, {})",
                self.classes()
            )));
        }
        Ok(self.table.row(label))
    }

    /// Rows for a batch of labels; `None` yields the all-zero patch.
    pub fn rows(&self, labels: Option<&[usize]>, batch: usize) -> Result<Tensor<T>> {
        match labels {
            None => Ok(Tensor::zeros(&[batch, self.width()])),
            Some(ls) => {
                for &l in ls {
                    self.patch(l)?;
                }
                Ok(self.table.gather_rows(ls))
            }
        }
    }
}

/// Appends a label patch as the final token of `[T, P]` patches.
pub fn concat_label_patch<T: Real>(
    patches: &Tensor<T>,
    label: usize,
    table: &LabelPatchTable<T>,
) -> Result<Tensor<T>> {
    if patches.ndim() != 2 || patches.shape()[1] != table.width() {
        return Err(crate::error::shape_err(
            "concat_label_patch",
            patches.shape(),
            &[table.width()],
        ));
    }
    let mut data = patches.data().to_vec();
    data.extend_from_slice(table.patch(label)?);
    Tensor::new(vec![patches.shape()[0] + 1, table.width()], data)
}

/// Mean over the token axis of `[T, E]`.
pub fn pool_tokens<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = LocalGraph::new();
    let x = g.constant(f.clone());
    let p = g.mean_over_axis(x, 0)?;
    Ok(g.detach(p))
}

/// `relu(x W + b)`.
pub fn mlp_layer_forward<T: Real>(g: &mut LocalGraph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    let h = g.add_bias(h, b)?;
    g.relu(h)
}

/// Linear classifier over pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Head<T> {
    /// Zero-initialised: uniform logits until trained.
    pub fn zeros(features: usize, classes: usize) -> Self {
        Head {
            w: Tensor::zeros(&[features, classes]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn features(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = LocalGraph::new();
        let x = g.constant(features.clone());
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let y = head_forward(&mut g, x, w, b)?;
        Ok(g.detach(y))
    }
}

/// `x W + b` mapping features to class logits.
pub fn head_forward<T: Real>(g: &mut LocalGraph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// What the encoder sees besides the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Contrastive training: images only.
    None,
    /// FF: a label vector of this width joins every input.
    Patch(usize),
}

impl LabelMode {
    fn width(self) -> usize {
        match self {
            LabelMode::None => 0,
            LabelMode::Patch(w) => w,
        }
    }
}

/// Result of one layer's recorded forward pass.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// Un-pooled output, passed to the next layer.
    pub out: Var,
    /// `[B, E]` pooled representation consumed by the loss.
    pub pooled: Var,
    /// Graph leaves of the layer's parameters, in [`LayerParams`] order.
    pub params: Vec<Var>,
}

/// An encoder as a stack of independently trained layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub spec: ModelSpec,
    pub image: ImageShape,
    pub label_mode: LabelMode,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn init(spec: ModelSpec, image: ImageShape, label_mode: LabelMode, seed: u64) -> Result<Self> {
        spec.validate(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match spec {
            ModelSpec::Mlp(s) => {
                let mut fan_in = image.numel() + label_mode.width();
                (0..s.layers)
                    .map(|_| {
                        let p = LayerParams::mlp(&mut rng, fan_in, s.units);
                        fan_in = s.units;
                        p
                    })
                    .collect()
            }
            ModelSpec::Vit(s) => {
                if let LabelMode::Patch(w) = label_mode {
                    if w != s.patch_dim(image) {
                        return Err(Error::Config(alloc::format!(
                            "label patch width {w} differs from patch size {}",
                            s.patch_dim(image)
                        )));
                    }
                }
                let tokens = s.num_patches(image)? + usize::from(label_mode != LabelMode::None);
                (0..s.layers)
                    .map(|l| {
                        let embed = (l == 0).then(|| (s.patch_dim(image), tokens));
                        LayerParams::encoder(&mut rng, s.embed_dim, s.heads, embed, s.pooling)
                    })
                    .collect()
            }
        };
        Ok(Encoder {
            spec,
            image,
            label_mode,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.spec.width()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::numel).sum()
    }

    /// Turns `[B, c, H, W]` images (plus optional label rows `[B, w]`) into
    /// the first layer's input: `[B, D]` for an MLP, `[B, T, P]` for a ViT.
    pub fn prepare_input(&self, images: &Tensor<T>, labels: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let b = images.shape()[0];
        if images.ndim() != 4 || images.numel() != b * self.image.numel() {
            return Err(crate::error::shape_err(
                "prepare_input",
                images.shape(),
                &[b, self.image.channels, self.image.height, self.image.width],
            ));
        }
        if labels.is_some() != (self.label_mode != LabelMode::None) {
            return Err(Error::Argument(
                "label rows must be given exactly when the encoder uses label patches".into(),
            ));
        }
        let lw = self.label_mode.width();
        if let Some(l) = labels {
            if l.shape() != [b, lw] {
                return Err(crate::error::shape_err("prepare_input labels", l.shape(), &[b, lw]));
            }
        }
        match self.spec {
            ModelSpec::Mlp(_) => {
                let d = self.image.numel();
                let mut out = Vec::with_capacity(b * (d + lw));
                for i in 0..b {
                    out.extend_from_slice(&images.data()[i * d..(i + 1) * d]);
                    if let Some(l) = labels {
                        out.extend_from_slice(l.row(i));
                    }
                }
                Tensor::new(vec![b, d + lw], out)
            }
            ModelSpec::Vit(s) => {
                let t = s.num_patches(self.image)?;
                let p = s.patch_dim(self.image);
                let tokens = t + usize::from(labels.is_some());
                let mut out = Vec::with_capacity(b * tokens * p);
                let per = self.image.numel();
                for i in 0..b {
                    let img = Tensor::new(
                        vec![self.image.channels, self.image.height, self.image.width],
                        images.data()[i * per..(i + 1) * per].to_vec(),
                    )?;
                    out.extend_from_slice(patchify(&img, &s)?.data());
                    if let Some(l) = labels {
                        out.extend_from_slice(l.row(i));
                    }
                }
                Tensor::new(vec![b, tokens, p], out)
            }
        }
    }

    /// Records layer `l`'s forward pass on `input`. Parameters enter the
    /// graph as trainable leaves when `trainable`, as constants otherwise.
    pub fn layer_forward(
        &self,
        l: usize,
        g: &mut LocalGraph<T>,
        input: Var,
        trainable: bool,
    ) -> Result<LayerOutput> {
        self.layers[l].forward(g, input, trainable)
    }

    /// Forward through every layer without recording gradients, returning
    /// each layer's pooled output. `normalize_between` feeds each successor
    /// the row-normalized output, as FF does.
    pub fn pooled_outputs(&self, input: &Tensor<T>, normalize_between: bool) -> Result<Vec<Tensor<T>>> {
        let mut x = input.clone();
        let mut pooled = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mut g = LocalGraph::new();
            let xv = g.constant(x);
            let out = self.layer_forward(l, &mut g, xv, false)?;
            pooled.push(g.detach(out.pooled));
            let next = if normalize_between {
                g.l2_normalize_rows(out.out)?
            } else {
                out.out
            };
            x = g.detach(next);
        }
        Ok(pooled)
    }
}

/// Trainable parameter count of `MLP[E L]` on `input_dim` inputs.
pub fn mlp_param_count(spec: &MlpSpec, input_dim: usize) -> usize {
    let e = spec.units;
    (input_dim * e + e) + (spec.layers - 1) * (e * e + e)
}

/// Trainable parameter count of a ViT encoder with `tokens` positions
/// (patches plus any label token).
///
/// Per block: two LayerNorms `4E`, four attention projections `4(E² + E)`
/// and the `E → 4E → E` feed-forward `8E² + 5E`, i.e. `12E² + 13E`. The
/// first layer adds the patch projection `PE + E`, the position table
/// `tokens · E` and, in class-token mode, `E` for the class token and `E`
/// for its position.
pub fn vit_param_count(spec: &VitSpec, patch_dim: usize, tokens: usize) -> usize {
    let e = spec.embed_dim;
    let block = 12 * e * e + 13 * e;
    let cls = match spec.pooling {
        Pooling::Mean => 0,
        Pooling::ClassToken => 2 * e,
    };
    spec.layers * block + patch_dim * e + e + tokens * e + cls
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST: ImageShape = ImageShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    const CIFAR: ImageShape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    fn vit(e: usize, h: usize, l: usize) -> VitSpec {
        VitSpec {
            embed_dim: e,
            heads: h,
            layers: l,
            patch_h: 4,
            patch_w: 4,
            pooling: Pooling::Mean,
        }
    }

    #[test]
    fn parameter_counts() {
        let spec = MlpSpec { units: 500, layers: 3 };
        assert_eq!(mlp_param_count(&spec, 784), 784 * 500 + 500 + 2 * (500 * 500 + 500));
        let enc = Encoder::<f32>::init(ModelSpec::Mlp(spec), MNIST, LabelMode::None, 0).unwrap();
        assert_eq!(enc.param_count(), 893_500);

        let s = vit(128, 4, 5);
        assert_eq!(vit_param_count(&s, 48, 64), 1_005_824);
        let enc = Encoder::<f32>::init(ModelSpec::Vit(s), CIFAR, LabelMode::None, 0).unwrap();
        assert_eq!(enc.param_count(), 1_005_824);
        let enc = Encoder::<f32>::init(ModelSpec::Vit(s), CIFAR, LabelMode::Patch(48), 0).unwrap();
        assert_eq!(enc.param_count(), vit_param_count(&s, 48, 65));
        let cls = VitSpec {
            pooling: Pooling::ClassToken,
            ..s
        };
        let enc = Encoder::<f32>::init(ModelSpec::Vit(cls), CIFAR, LabelMode::None, 0).unwrap();
        assert_eq!(enc.param_count(), vit_param_count(&cls, 48, 64));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::Vit(vit(30, 4, 1)).validate(CIFAR).is_err());
        let odd = ImageShape {
            channels: 3,
            height: 30,
            width: 32,
        };
        assert!(matches!(
            ModelSpec::Vit(vit(32, 4, 1)).validate(odd),
            Err(Error::Config(_))
        ));
        assert!(ModelSpec::Mlp(MlpSpec { units: 0, layers: 1 }).validate(MNIST).is_err());
    }

    #[test]
    fn label_patches() {
        let table = LabelPatchTable::<f32>::random(10, 48, 3);
        assert_eq!(table, LabelPatchTable::random(10, 48, 3));
        let patches = Tensor::<f32>::from_fn(&[64, 48], |i| i as f32);
        let a = concat_label_patch(&patches, 2, &table).unwrap();
        let b = concat_label_patch(&patches, 7, &table).unwrap();
        assert_eq!(a.shape(), &[65, 48]);
        assert_eq!(a.data()[..64 * 48], b.data()[..64 * 48]);
        assert_ne!(a.row(64), b.row(64));
        assert!(concat_label_patch(&patches, 10, &table).is_err());
        let zeros = table.rows(None, 3).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_examples() {
        let same = Tensor::<f64>::from_fn(&[5, 3], |i| (i % 3) as f64);
        assert_eq!(pool_tokens(&same).unwrap().data(), &[0.0, 1.0, 2.0]);
        let u = Tensor::from_rows(&[vec![1.5f64, -2.0], vec![-1.5, 2.0]]).unwrap();
        assert_eq!(pool_tokens(&u).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mlp_layer_examples() {
        let mut g = LocalGraph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let w = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = mlp_layer_forward(&mut g, x, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let w = g.constant(Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { -1.0 } else { -0.5 }));
        let b = g.constant(Tensor::full(&[4], -10.0));
        let y = mlp_layer_forward(&mut g, x, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_examples() {
        let head = Head::<f64>::zeros(128, 10);
        let logits = head.forward(&Tensor::from_fn(&[4, 128], |i| i as f64)).unwrap();
        assert_eq!(logits.shape(), &[4, 10]);
        let ce = crate::losses::cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prepare_input_layouts() {
        let enc = Encoder::<f32>::init(
            ModelSpec::Mlp(MlpSpec { units: 8, layers: 2 }),
            MNIST,
            LabelMode::Patch(10),
            1,
        )
        .unwrap();
        let imgs = Tensor::from_fn(&[2, 1, 28, 28], |i| i as f32);
        let table = LabelPatchTable::one_hot(10);
        let labels = table.rows(Some(&[3, 9]), 2).unwrap();
        let x = enc.prepare_input(&imgs, Some(&labels)).unwrap();
        assert_eq!(x.shape(), &[2, 794]);
        assert_eq!(x.row(1)[784 + 9], 1.0);
        assert_eq!(x.row(1)[0], 784.0);
        assert!(enc.prepare_input(&imgs, None).is_err());

        let enc = Encoder::<f32>::init(ModelSpec::Vit(vit(16, 2, 2)), CIFAR, LabelMode::None, 1).unwrap();
        let imgs = Tensor::from_fn(&[3, 3, 32, 32], |i| i as f32);
        assert_eq!(enc.prepare_input(&imgs, None).unwrap().shape(), &[3, 64, 48]);
    }
}

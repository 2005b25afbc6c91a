use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::init::{truncated_normal, uniform_fan_in};
use super::vit::{embed, encoder_layer_forward, EncoderVars};
use super::{mlp_layer_forward, LayerOutput, Pooling};
use crate::error::{shape_err, Error, Result};
use crate::graph::{LocalGraph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

const VIT_STD: f64 = 0.02;

const BLOCK_NAMES: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];
const EMBED_NAMES: [&str; 3] = ["embed.proj_w", "embed.proj_b", "embed.pos"];
const CLS_NAME: &str = "embed.cls";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `relu(x W + b)`.
    Mlp,
    /// Pre-norm transformer block. The first layer also owns the patch
    /// projection and position table (`embed = Some((patch_dim, tokens))`).
    Encoder {
        heads: usize,
        embed: Option<(usize, usize)>,
        pooling: Pooling,
    },
}

/// All trainable tensors of one layer, in a fixed named order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    kind: LayerKind,
    names: Vec<&'static str>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> LayerParams<T> {
    pub(crate) fn mlp(rng: &mut impl Rng, fan_in: usize, units: usize) -> Self {
        LayerParams {
            kind: LayerKind::Mlp,
            names: vec!["w", "b"],
            tensors: vec![
                uniform_fan_in(rng, &[fan_in, units], fan_in),
                uniform_fan_in(rng, &[units], fan_in),
            ],
        }
    }

    pub(crate) fn encoder(
        rng: &mut impl Rng,
        e: usize,
        heads: usize,
        embed: Option<(usize, usize)>,
        pooling: Pooling,
    ) -> Self {
        let mut names: Vec<&'static str> = BLOCK_NAMES.to_vec();
        let ones = || Tensor::full(&[e], T::one());
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let mut tensors = vec![
            ones(),
            zeros(e),
            truncated_normal(rng, &[e, e], VIT_STD),
            zeros(e),
            truncated_normal(rng, &[e, e], VIT_STD),
            zeros(e),
            truncated_normal(rng, &[e, e], VIT_STD),
            zeros(e),
            truncated_normal(rng, &[e, e], VIT_STD),
            zeros(e),
            ones(),
            zeros(e),
            truncated_normal(rng, &[e, 4 * e], VIT_STD),
            zeros(4 * e),
            truncated_normal(rng, &[4 * e, e], VIT_STD),
            zeros(e),
        ];
        if let Some((patch_dim, tokens)) = embed {
            let cls = usize::from(pooling == Pooling::ClassToken);
            names.extend(EMBED_NAMES);
            tensors.push(truncated_normal(rng, &[patch_dim, e], VIT_STD));
            tensors.push(zeros(e));
            tensors.push(truncated_normal(rng, &[tokens + cls, e], VIT_STD));
            if cls == 1 {
                names.push(CLS_NAME);
                tensors.push(truncated_normal(rng, &[1, e], VIT_STD));
            }
        }
        LayerParams {
            kind: LayerKind::Encoder {
                heads,
                embed,
                pooling,
            },
            names,
            tensors,
        }
    }

    /// Rebuilds a layer from stored tensors, checking names and shapes
    /// against a freshly initialised template.
    pub fn from_parts(template: &LayerParams<T>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != template.tensors.len() {
            return Err(Error::Argument(alloc::format!(
                "expected {} tensors, got {}",
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (t, r) in tensors.iter().zip(&template.tensors) {
            if t.shape() != r.shape() {
                return Err(shape_err("layer tensor", t.shape(), r.shape()));
            }
        }
        Ok(LayerParams {
            kind: template.kind,
            names: template.names.clone(),
            tensors,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|&n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `"{prefix}.{name}"` for every tensor.
    pub fn paths(&self, prefix: &str) -> Vec<String> {
        self.names
            .iter()
            .map(|n| alloc::format!("{prefix}.{n}"))
            .collect()
    }

    pub(crate) fn forward(&self, g: &mut LocalGraph<T>, input: Var, trainable: bool) -> Result<LayerOutput> {
        let params: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        match self.kind {
            LayerKind::Mlp => {
                let out = mlp_layer_forward(g, input, params[0], params[1])?;
                Ok(LayerOutput {
                    out,
                    pooled: out,
                    params,
                })
            }
            LayerKind::Encoder {
                heads,
                embed,
                pooling,
            } => {
                let x = match embed {
                    Some((patch_dim, tokens)) => {
                        embed_tokens(g, input, &params[16..], patch_dim, tokens, pooling)?
                    }
                    None => input,
                };
                let vars = EncoderVars::from_slice(&params[..16]);
                let out = encoder_layer_forward(g, x, &vars, heads)?;
                let pooled = match pooling {
                    Pooling::Mean => g.mean_over_axis(out, 1)?,
                    Pooling::ClassToken => g.take_index(out, 1, 0)?,
                };
                Ok(LayerOutput {
                    out,
                    pooled,
                    params,
                })
            }
        }
    }
}

fn embed_tokens<T: Real>(
    g: &mut LocalGraph<T>,
    input: Var,
    p: &[Var],
    patch_dim: usize,
    tokens: usize,
    pooling: Pooling,
) -> Result<Var> {
    let shape = g.value(input).shape();
    if shape.len() != 3 || shape[1] != tokens || shape[2] != patch_dim {
        return Err(shape_err("embed", shape, &[0, tokens, patch_dim]));
    }
    let cls = (pooling == Pooling::ClassToken).then(|| p[3]);
    embed(g, input, p[0], p[1], p[2], cls)
}

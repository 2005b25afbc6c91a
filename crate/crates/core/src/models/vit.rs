use alloc::vec::Vec;

use super::VitSpec;
use crate::error::{shape_err, Result};
use crate::graph::{LocalGraph, Var, LAYER_NORM_EPS};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits a `[c, H, W]` image into `[num_patches, h·w·c]`: patches in
/// row-major order, each flattened channel-major.
pub fn patchify<T: Real>(image: &Tensor<T>, spec: &VitSpec) -> Result<Tensor<T>> {
    let (c, hh, ww) = image_dims(image)?;
    let shape = super::ImageShape {
        channels: c,
        height: hh,
        width: ww,
    };
    let n = spec.num_patches(shape)?;
    let (ph, pw) = (spec.patch_h, spec.patch_w);
    let across = ww / pw;
    let mut out = Vec::with_capacity(image.numel());
    for p in 0..n {
        let (r0, c0) = ((p / across) * ph, (p % across) * pw);
        for ch in 0..c {
            for r in r0..r0 + ph {
                let start = (ch * hh + r) * ww + c0;
                out.extend_from_slice(&image.data()[start..start + pw]);
            }
        }
    }
    Tensor::new(alloc::vec![n, ph * pw * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    patches: &Tensor<T>,
    spec: &VitSpec,
    image: super::ImageShape,
) -> Result<Tensor<T>> {
    let n = spec.num_patches(image)?;
    let (ph, pw, c) = (spec.patch_h, spec.patch_w, image.channels);
    if patches.shape() != [n, ph * pw * c] {
        return Err(shape_err("unpatchify", patches.shape(), &[n, ph * pw * c]));
    }
    let (hh, ww) = (image.height, image.width);
    let across = ww / pw;
    let mut out = alloc::vec![T::zero(); image.numel()];
    let mut src = patches.data().iter();
    for p in 0..n {
        let (r0, c0) = ((p / across) * ph, (p % across) * pw);
        for ch in 0..c {
            for r in r0..r0 + ph {
                let start = (ch * hh + r) * ww + c0;
                for v in &mut out[start..start + pw] {
                    *v = *src.next().expect("sized above");
                }
            }
        }
    }
    Tensor::new(alloc::vec![c, hh, ww], out)
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err("patchify", image.shape(), &[0, 0, 0])),
    }
}

/// `[B, T, P]` patches to `[B, T', E]`: `patches · W + b`, an optional
/// class token in front, then the learned position table `pos: [T', E]`.
pub fn embed<T: Real>(
    g: &mut LocalGraph<T>,
    patches: Var,
    w: Var,
    b: Var,
    pos: Var,
    cls: Option<Var>,
) -> Result<Var> {
    let shape = g.value(patches).shape().to_vec();
    if shape.len() != 3 {
        return Err(shape_err("embed", &shape, &[0, 0, 0]));
    }
    let (batch, tokens, patch_dim) = (shape[0], shape[1], shape[2]);
    let e = g.value(b).numel();
    let flat = g.reshape(patches, &[batch * tokens, patch_dim])?;
    let proj = g.matmul(flat, w)?;
    let proj = g.add_bias(proj, b)?;
    let mut x = g.reshape(proj, &[batch, tokens, e])?;
    let mut total = tokens;
    if let Some(cls) = cls {
        let ones = g.constant(Tensor::full(&[batch, 1], T::one()));
        let c = g.matmul(ones, cls)?;
        let c = g.reshape(c, &[batch, 1, e])?;
        x = g.concat(c, x, 1)?;
        total += 1;
    }
    if g.value(pos).shape() != [total, e] {
        return Err(shape_err("embed position table", g.value(pos).shape(), &[total, e]));
    }
    let x = g.reshape(x, &[batch, total * e])?;
    let p = g.reshape(pos, &[total * e])?;
    let x = g.add_bias(x, p)?;
    g.reshape(x, &[batch, total, e])
}

/// Graph leaves of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderVars {
    pub fn from_slice(v: &[Var]) -> Self {
        EncoderVars {
            ln1_gain: v[0],
            ln1_bias: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gain: v[10],
            ln2_bias: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        }
    }
}

fn affine<T: Real>(g: &mut LocalGraph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// `[B·T, E]` to `[B·H, T, d]`.
fn split_heads<T: Real>(g: &mut LocalGraph<T>, x: Var, b: usize, t: usize, h: usize) -> Result<Var> {
    let d = g.value(x).last_dim() / h;
    let x = g.reshape(x, &[b, t, h, d])?;
    let x = g.swap_axes12(x)?;
    g.reshape(x, &[b * h, t, d])
}

/// Pre-norm block on `[B, T, E]`:
/// `z = x + MSA(LN(x))`, `out = z + FFN(LN(z))` with a GELU feed-forward.
pub fn encoder_layer_forward<T: Real>(
    g: &mut LocalGraph<T>,
    x: Var,
    p: &EncoderVars,
    heads: usize,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
        return Err(shape_err("encoder_layer", &shape, &[0, 0, heads]));
    }
    let (b, t, e) = (shape[0], shape[1], shape[2]);
    let d = e / heads;
    let eps = T::lit(LAYER_NORM_EPS);

    let x2 = g.reshape(x, &[b * t, e])?;
    let h = g.layer_norm(x2, p.ln1_gain, p.ln1_bias, eps)?;
    let q = affine(g, h, p.wq, p.bq)?;
    let k = affine(g, h, p.wk, p.bk)?;
    let v = affine(g, h, p.wv, p.bv)?;
    let q = split_heads(g, q, b, t, heads)?;
    let k = split_heads(g, k, b, t, heads)?;
    let v = split_heads(g, v, b, t, heads)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::count(d).sqrt())?;
    let attn = g.softmax_rows(scores)?;
    let o = g.batch_matmul(attn, v, false)?;
    let o = g.reshape(o, &[b, heads, t, d])?;
    let o = g.swap_axes12(o)?;
    let o = g.reshape(o, &[b * t, e])?;
    let o = affine(g, o, p.wo, p.bo)?;
    let z = g.add(x2, o)?;

    let h = g.layer_norm(z, p.ln2_gain, p.ln2_bias, eps)?;
    let f = affine(g, h, p.w1, p.b1)?;
    let f = g.gelu(f)?;
    let f = affine(g, f, p.w2, p.b2)?;
    let out = g.add(z, f)?;
    g.reshape(out, &[b, t, e])
}

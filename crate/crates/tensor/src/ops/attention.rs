//! Multi-head self-attention and a post-norm transformer encoder stack.

use crate::error::{Result, TensorError};
use crate::ops::matmul::linear;
use crate::ops::norm::{layer_norm, NORM_EPS};
use crate::real::Real;
use crate::tape::Var;

/// Projection weights of one self-attention block (`weight: [D, D]`, `bias: [D]`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t, F: Real> {
    pub q_weight: Var<'t, F>,
    pub q_bias: Var<'t, F>,
    pub k_weight: Var<'t, F>,
    pub k_bias: Var<'t, F>,
    pub v_weight: Var<'t, F>,
    pub v_bias: Var<'t, F>,
    pub out_weight: Var<'t, F>,
    pub out_bias: Var<'t, F>,
}

/// One encoder layer: attention, then a two-layer rectified feed-forward
/// block, each followed by residual add and layer norm.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams<'t, F: Real> {
    pub attention: AttentionParams<'t, F>,
    pub norm1_gamma: Var<'t, F>,
    pub norm1_beta: Var<'t, F>,
    pub ff1_weight: Var<'t, F>,
    pub ff1_bias: Var<'t, F>,
    pub ff2_weight: Var<'t, F>,
    pub ff2_bias: Var<'t, F>,
    pub norm2_gamma: Var<'t, F>,
    pub norm2_beta: Var<'t, F>,
}

/// Intermediate tensors of an encoder pass.
#[derive(Debug)]
pub struct EncoderOutput<'t, F: Real> {
    pub output: Var<'t, F>,
    /// Per-layer attention weights `[B, H, T, T]`.
    pub attention_weights: Vec<Var<'t, F>>,
    /// Per-layer attention block outputs (before the first residual).
    pub attention_outputs: Vec<Var<'t, F>>,
    /// Per-layer outputs.
    pub layer_outputs: Vec<Var<'t, F>>,
}

fn split_heads<'t, F: Real>(x: Var<'t, F>, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var<'t, F>> {
    x.reshape(vec![b, t, heads, dh])?.permute(&[0, 2, 1, 3])
}

/// Scaled dot-product self-attention over `[B, T, D]`.
///
/// Returns the projected output `[B, T, D]` and attention weights
/// `[B, heads, T, T]` whose rows sum to one.
pub fn multi_head_attention<'t, F: Real>(
    x: Var<'t, F>,
    p: &AttentionParams<'t, F>,
    heads: usize,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(TensorError::dim("attention", "input rank", 3, s.len()));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::config(
            "attention",
            format!("model width {d} is not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let q = split_heads(linear(x, p.q_weight, Some(p.q_bias))?, b, t, heads, dh)?;
    let k = split_heads(linear(x, p.k_weight, Some(p.k_bias))?, b, t, heads, dh)?;
    let v = split_heads(linear(x, p.v_weight, Some(p.v_bias))?, b, t, heads, dh)?;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let weights = q.bmm(k, true)?.scale(scale).softmax()?;
    let context = weights
        .bmm(v, false)?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, t, d])?;
    let out = linear(context, p.out_weight, Some(p.out_bias))?;
    Ok((out, weights))
}

/// Applies a stack of encoder layers to `[B, T, D]`; shape is preserved.
pub fn transformer_encoder<'t, F: Real>(
    x: Var<'t, F>,
    layers: &[EncoderLayerParams<'t, F>],
    heads: usize,
) -> Result<EncoderOutput<'t, F>> {
    let d = *x.shape().last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::config(
            "transformer_encoder",
            format!("model width {d} is not divisible by {heads} heads"),
        ));
    }
    let mut h = x;
    let mut out = EncoderOutput {
        output: x,
        attention_weights: Vec::with_capacity(layers.len()),
        attention_outputs: Vec::with_capacity(layers.len()),
        layer_outputs: Vec::with_capacity(layers.len()),
    };
    for layer in layers {
        let (attn, weights) = multi_head_attention(h, &layer.attention, heads)?;
        let h1 = layer_norm(h.add(attn)?, layer.norm1_gamma, layer.norm1_beta, NORM_EPS)?;
        let ff = linear(h1, layer.ff1_weight, Some(layer.ff1_bias))?.relu();
        let ff = linear(ff, layer.ff2_weight, Some(layer.ff2_bias))?;
        h = layer_norm(h1.add(ff)?, layer.norm2_gamma, layer.norm2_beta, NORM_EPS)?;
        out.attention_weights.push(weights);
        out.attention_outputs.push(attn);
        out.layer_outputs.push(h);
    }
    out.output = h;
    Ok(out)
}

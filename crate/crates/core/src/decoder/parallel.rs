//! Full-sequence forward under a chunk mask.
//!
//! This is both the training-time forward (recorded on a tape) and the
//! reference the incremental decoder is checked against.

use super::positional::positional_encoding;
use super::weights::{DecoderParams, DecoderWeights, LayerParams};
use super::DecoderConfig;
use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::mask::ChunkMask;
use crate::tensor::{Scalar, Tensor};

/// Multi-head attention for queries `q` against keys/values `k`, `v`
/// (all fused `[T × d_model]`), followed by the output projection.
pub(crate) fn attention<S: Scalar, O: Ops<S>>(
    o: &mut O,
    cfg: &DecoderConfig,
    q: &O::V,
    k: &O::V,
    v: &O::V,
    wo: &O::V,
    mask: Option<&ChunkMask>,
) -> Result<O::V> {
    let dh = cfg.d_head();
    let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let qh = o.slice_cols(q, i * dh, dh)?;
        let kh = o.slice_cols(k, i * dh, dh)?;
        let vh = o.slice_cols(v, i * dh, dh)?;
        let logits = o.matmul_nt(&qh, &kh)?;
        let logits = o.scale(&logits, inv_sqrt)?;
        let probs = o.masked_softmax(&logits, mask)?;
        heads.push(o.matmul(&probs, &vh)?);
    }
    let cat = o.concat_cols(&heads)?;
    o.matmul(&cat, wo)
}

/// Convolutional feed-forward over a full sequence: each conv sees `k - 1`
/// zero frames of left context.
pub(crate) fn conv_ffn<S: Scalar, O: Ops<S>>(
    o: &mut O,
    cfg: &DecoderConfig,
    x: &O::V,
    p: &LayerParams<O::V>,
) -> Result<O::V> {
    let pad1 = o.constant(Tensor::zeros(&[cfg.conv1_state(), cfg.d_model]));
    let c1 = o.concat_time(&pad1, x)?;
    let h1 = o.causal_conv1d(&c1, &p.conv1_w, &p.conv1_b)?;
    let h1 = o.relu(&h1)?;
    let pad2 = o.constant(Tensor::zeros(&[cfg.conv2_state(), cfg.d_ff]));
    let c2 = o.concat_time(&pad2, &h1)?;
    let h2 = o.causal_conv1d(&c2, &p.conv2_w, &p.conv2_b)?;
    o.relu(&h2)
}

/// One FFT block over the whole sequence. When `taps` is given, the
/// attention sublayer output is pushed onto it.
pub fn fft_block_program<S: Scalar, O: Ops<S>>(
    o: &mut O,
    cfg: &DecoderConfig,
    x: &O::V,
    p: &LayerParams<O::V>,
    mask: Option<&ChunkMask>,
    taps: Option<&mut Vec<O::V>>,
) -> Result<O::V> {
    let eps = S::from_f64(cfg.ln_eps);
    let q = o.matmul(x, &p.wq)?;
    let k = o.matmul(x, &p.wk)?;
    let v = o.matmul(x, &p.wv)?;
    let attn = attention(o, cfg, &q, &k, &v, &p.wo, mask)?;
    if let Some(t) = taps {
        t.push(attn.clone());
    }
    let r1 = o.add(x, &attn)?;
    let r1 = o.layer_norm(&r1, &p.ln1_gamma, &p.ln1_beta, eps)?;
    let ff = conv_ffn(o, cfg, &r1, p)?;
    let r2 = o.add(&r1, &ff)?;
    o.layer_norm(&r2, &p.ln2_gamma, &p.ln2_beta, eps)
}

/// Positional encoding, `n_layers` FFT blocks, and the mel projection.
pub fn decoder_program<S: Scalar, O: Ops<S>>(
    o: &mut O,
    cfg: &DecoderConfig,
    features: &O::V,
    p: &DecoderParams<O::V>,
    mask: Option<&ChunkMask>,
    mut taps: Option<&mut Vec<O::V>>,
) -> Result<O::V> {
    let (t, d) = o.value(features).dims2()?;
    if d != cfg.d_model {
        return Err(Error::shape(
            "decoder",
            format!("features have {} dims, d_model is {}", d, cfg.d_model),
        ));
    }
    if let Some(m) = mask {
        if m.total_frames() != t {
            return Err(Error::shape(
                "decoder",
                format!("mask covers {} frames, features have {}", m.total_frames(), t),
            ));
        }
    }
    let pe = o.constant(positional_encoding(0, t, d));
    let mut x = o.add(features, &pe)?;
    for layer in &p.layers {
        x = fft_block_program(o, cfg, &x, layer, mask, taps.as_deref_mut())?;
    }
    let y = o.matmul(&x, &p.proj_w)?;
    o.add_row(&y, &p.proj_b)
}

/// Unrestricted full-sequence forward, as a non-incremental decoder would run.
pub fn decode_parallel<S: Scalar>(
    features: &Tensor<S>,
    cfg: &DecoderConfig,
    weights: &DecoderWeights<S>,
) -> Result<Tensor<S>> {
    decoder_program(&mut Eager, cfg, features, weights, None, None)
}

/// Full-sequence forward with every attention layer restricted by `mask`.
pub fn decode_parallel_masked<S: Scalar>(
    features: &Tensor<S>,
    cfg: &DecoderConfig,
    weights: &DecoderWeights<S>,
    mask: &ChunkMask,
) -> Result<Tensor<S>> {
    decoder_program(&mut Eager, cfg, features, weights, Some(mask), None)
}

/// Like [`decode_parallel_masked`], also returning each layer's attention
/// sublayer output.
pub fn decode_parallel_with_taps<S: Scalar>(
    features: &Tensor<S>,
    cfg: &DecoderConfig,
    weights: &DecoderWeights<S>,
    mask: Option<&ChunkMask>,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let mut taps = Vec::new();
    let y = decoder_program(&mut Eager, cfg, features, weights, mask, Some(&mut taps))?;
    Ok((y, taps))
}

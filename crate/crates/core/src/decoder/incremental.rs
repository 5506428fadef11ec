//! Chunk-by-chunk inference with fixed-size caches.

use serde::{Deserialize, Serialize};

use super::parallel::attention;
use super::positional::positional_encoding;
use super::state::{AttentionState, ConvState, DecoderState, LayerState};
use super::weights::{DecoderWeights, LayerParams};
use super::DecoderConfig;
use crate::autodiff::Eager;
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Caches to discard between chunks, for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    DropKv,
    DropConv,
    DropBoth,
}

impl Ablation {
    fn drops_kv(self) -> bool {
        matches!(self, Ablation::DropKv | Ablation::DropBoth)
    }

    fn drops_conv(self) -> bool {
        matches!(self, Ablation::DropConv | Ablation::DropBoth)
    }
}

/// Attention over `concat(past, chunk)` keys/values; every query of the
/// chunk sees the whole cache and the whole chunk. The new cache is the
/// tail of the concatenation, capped at the configured past size.
pub fn mha_chunk_step<S: Scalar>(
    cfg: &DecoderConfig,
    x: &Tensor<S>,
    w: &LayerParams<Tensor<S>>,
    st: &AttentionState<S>,
) -> Result<(Tensor<S>, AttentionState<S>)> {
    let (t, d) = x.dims2()?;
    if d != cfg.d_model || t == 0 {
        return Err(Error::shape(
            "mha_chunk_step",
            format!("chunk {:?}, d_model {}", x.shape(), cfg.d_model),
        ));
    }
    let dh = cfg.d_head();
    let q = tensor::matmul(x, &w.wq)?;
    let k_new = tensor::matmul(x, &w.wk)?;
    let v_new = tensor::matmul(x, &w.wv)?;

    let limit = cfg.past_size.limit();
    let mut k_parts = Vec::with_capacity(cfg.n_heads);
    let mut v_parts = Vec::with_capacity(cfg.n_heads);
    let mut next = AttentionState {
        pk: Vec::with_capacity(cfg.n_heads),
        pv: Vec::with_capacity(cfg.n_heads),
    };
    for i in 0..cfg.n_heads {
        let k = tensor::concat_time(&st.pk[i], &tensor::slice_cols(&k_new, i * dh, dh)?)?;
        let v = tensor::concat_time(&st.pv[i], &tensor::slice_cols(&v_new, i * dh, dh)?)?;
        next.pk.push(tensor::tail_slice(&k, limit));
        next.pv.push(tensor::tail_slice(&v, limit));
        k_parts.push(k);
        v_parts.push(v);
    }
    // Re-fuse heads so the shared attention routine runs the exact kernel
    // sequence of the full-sequence path.
    let kr: Vec<&Tensor<S>> = k_parts.iter().collect();
    let vr: Vec<&Tensor<S>> = v_parts.iter().collect();
    let k = tensor::concat_cols(&kr)?;
    let v = tensor::concat_cols(&vr)?;
    let o = attention(&mut Eager, cfg, &q, &k, &v, &w.wo, None)?;
    Ok((o, next))
}

/// Two causal convolutions, each fed `concat(state, input)`.
pub fn ffn_chunk_step<S: Scalar>(
    cfg: &DecoderConfig,
    x: &Tensor<S>,
    w: &LayerParams<Tensor<S>>,
    st: &ConvState<S>,
) -> Result<(Tensor<S>, ConvState<S>)> {
    if st.pc1.shape() != [cfg.conv1_state(), cfg.d_model]
        || st.pc2.shape() != [cfg.conv2_state(), cfg.d_ff]
    {
        return Err(Error::shape(
            "ffn_chunk_step",
            format!(
                "conv states {:?} / {:?} for kernels {} / {}",
                st.pc1.shape(),
                st.pc2.shape(),
                cfg.kernel1,
                cfg.kernel2
            ),
        ));
    }
    let c1 = tensor::concat_time(&st.pc1, x)?;
    let h1 = tensor::relu(&tensor::causal_conv1d(&c1, &w.conv1_w, &w.conv1_b)?);
    let c2 = tensor::concat_time(&st.pc2, &h1)?;
    let h2 = tensor::relu(&tensor::causal_conv1d(&c2, &w.conv2_w, &w.conv2_b)?);
    let next = ConvState {
        pc1: tensor::tail_slice(&c1, cfg.conv1_state()),
        pc2: tensor::tail_slice(&c2, cfg.conv2_state()),
    };
    Ok((h2, next))
}

/// `LN₂(r₁ + ffn(r₁))` with `r₁ = LN₁(x + mha(x))`.
pub fn fft_block_step<S: Scalar>(
    cfg: &DecoderConfig,
    x: &Tensor<S>,
    w: &LayerParams<Tensor<S>>,
    st: &LayerState<S>,
) -> Result<(Tensor<S>, LayerState<S>)> {
    let eps = S::from_f64(cfg.ln_eps);
    let (attn, attn_state) = mha_chunk_step(cfg, x, w, &st.attn)?;
    let r1 = tensor::layer_norm(&tensor::add(x, &attn)?, &w.ln1_gamma, &w.ln1_beta, eps)?;
    let (ff, conv_state) = ffn_chunk_step(cfg, &r1, w, &st.conv)?;
    let y = tensor::layer_norm(&tensor::add(&r1, &ff)?, &w.ln2_gamma, &w.ln2_beta, eps)?;
    Ok((
        y,
        LayerState {
            attn: attn_state,
            conv: conv_state,
        },
    ))
}

/// A single synthesis stream. Owns its state; borrows the shared weights.
#[derive(Debug, Clone)]
pub struct IncrementalDecoder<'w, S> {
    cfg: DecoderConfig,
    weights: &'w DecoderWeights<S>,
    state: DecoderState<S>,
    ablation: Ablation,
}

impl<'w, S: Scalar> IncrementalDecoder<'w, S> {
    pub fn new(cfg: &DecoderConfig, weights: &'w DecoderWeights<S>) -> Result<Self> {
        weights.validate(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            weights,
            state: DecoderState::new(cfg),
            ablation: Ablation::None,
        })
    }

    /// Resumes a stream from a saved state.
    pub fn with_state(
        cfg: &DecoderConfig,
        weights: &'w DecoderWeights<S>,
        state: DecoderState<S>,
    ) -> Result<Self> {
        weights.validate(cfg)?;
        state.validate(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            weights,
            state,
            ablation: Ablation::None,
        })
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DecoderState<S> {
        &self.state
    }

    pub fn into_state(self) -> DecoderState<S> {
        self.state
    }

    /// Decodes one feature chunk `[≤ chunk_size × d_model]` into mel frames.
    pub fn step(&mut self, chunk: &Tensor<S>) -> Result<Tensor<S>> {
        let (t, d) = chunk.dims2()?;
        if t == 0 || t > self.cfg.chunk_size || d != self.cfg.d_model {
            return Err(Error::shape(
                "decode step",
                format!(
                    "chunk {:?} for chunk_size {} and d_model {}",
                    chunk.shape(),
                    self.cfg.chunk_size,
                    self.cfg.d_model
                ),
            ));
        }
        let pe = positional_encoding(self.state.frame_offset, t, d);
        let mut x = tensor::add(chunk, &pe)?;
        for (w, st) in self.weights.layers.iter().zip(self.state.layers.iter_mut()) {
            let (y, mut next) = fft_block_step(&self.cfg, &x, w, st)?;
            if self.ablation.drops_kv() {
                next.attn = AttentionState::empty(&self.cfg);
            }
            if self.ablation.drops_conv() {
                next.conv = ConvState::zeros(&self.cfg);
            }
            *st = next;
            x = y;
        }
        self.state.frame_offset += t;
        let y = tensor::matmul(&x, &self.weights.proj_w)?;
        tensor::add_row(&y, &self.weights.proj_b)
    }
}

/// Splits `[T × d]` into consecutive chunks of `chunk` frames; the last may be shorter.
pub fn split_chunks<S: Scalar>(features: &Tensor<S>, chunk: usize) -> Result<Vec<Tensor<S>>> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let t = features.frames();
    (0..t)
        .step_by(chunk)
        .map(|s| tensor::slice_time(features, s, chunk.min(t - s)))
        .collect()
}

pub fn concat_chunks<S: Scalar>(chunks: &[Tensor<S>]) -> Result<Tensor<S>> {
    let mut it = chunks.iter();
    let Some(first) = it.next() else {
        return Err(Error::shape("concat_chunks", "no chunks"));
    };
    let mut out = first.clone();
    for c in it {
        out = tensor::concat_time(&out, c)?;
    }
    Ok(out)
}

/// Decodes a whole feature sequence chunk by chunk.
pub fn decode_incremental<S: Scalar>(
    features: &Tensor<S>,
    cfg: &DecoderConfig,
    weights: &DecoderWeights<S>,
) -> Result<Vec<Tensor<S>>> {
    decode_incremental_with(features, cfg, weights, Ablation::None)
}

pub fn decode_incremental_with<S: Scalar>(
    features: &Tensor<S>,
    cfg: &DecoderConfig,
    weights: &DecoderWeights<S>,
    ablation: Ablation,
) -> Result<Vec<Tensor<S>>> {
    if features.frames() == 0 {
        return Err(Error::shape("decode_incremental", "empty feature sequence"));
    }
    let mut dec = IncrementalDecoder::new(cfg, weights)?.with_ablation(ablation);
    split_chunks(features, cfg.chunk_size)?
        .iter()
        .map(|c| dec.step(c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{decode_parallel_masked, decode_parallel_with_taps};
    use crate::mask::{build_static_mask, PastSize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn small(chunk: usize, past: PastSize) -> DecoderConfig {
        DecoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            mel_bins: 6,
            chunk_size: chunk,
            past_size: past,
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn matches_masked_parallel_bit_for_bit() {
        for (chunk, past, t) in [(4, 0, 13), (4, 2, 13), (4, 4, 16), (3, 7, 20), (5, 3, 2), (1, 1, 6)] {
            let cfg = small(chunk, PastSize::Frames(past));
            let w = DecoderWeights::init(&cfg, 11).unwrap();
            let x = features(t, cfg.d_model, 5);
            let inc = concat_chunks(&decode_incremental(&x, &cfg, &w).unwrap()).unwrap();
            let mask = build_static_mask(t, chunk, cfg.past_size).unwrap();
            let par = decode_parallel_masked(&x, &cfg, &w, &mask).unwrap();
            assert_eq!(inc, par, "chunk {chunk} past {past} T {t}");
        }
    }

    #[test]
    fn unbounded_past_matches_too() {
        let cfg = small(3, PastSize::All);
        let w = DecoderWeights::init(&cfg, 2).unwrap();
        let x = features(11, 8, 3);
        let inc = concat_chunks(&decode_incremental(&x, &cfg, &w).unwrap()).unwrap();
        let mask = build_static_mask(11, 3, PastSize::All).unwrap();
        assert_eq!(inc, decode_parallel_masked(&x, &cfg, &w, &mask).unwrap());
    }

    #[test]
    fn caches_stay_bounded() {
        let cfg = small(2, PastSize::Frames(3));
        let w = DecoderWeights::init(&cfg, 1).unwrap();
        let mut dec = IncrementalDecoder::new(&cfg, &w).unwrap();
        let mut sizes = Vec::new();
        for c in split_chunks(&features(40, 8, 9), 2).unwrap() {
            dec.step(&c).unwrap();
            for l in &dec.state().layers {
                assert!(l.attn.past_frames() <= 3);
                assert_eq!(l.conv.pc1.frames(), cfg.conv1_state());
                assert_eq!(l.conv.pc2.frames(), cfg.conv2_state());
            }
            sizes.push(dec.state().cached_elements());
        }
        assert!(sizes[2..].iter().all(|&s| s == sizes[2]));
    }

    #[test]
    fn later_chunks_never_affect_earlier_output() {
        let cfg = small(4, PastSize::Frames(4));
        let w = DecoderWeights::init(&cfg, 4).unwrap();
        let x = features(16, 8, 1);
        let base = decode_incremental(&x, &cfg, &w).unwrap();
        let mut y = x.clone();
        for v in &mut y.data_mut()[8 * 8..] {
            *v += 3.0;
        }
        let pert = decode_incremental(&y, &cfg, &w).unwrap();
        assert_eq!(base[..2], pert[..2]);
        assert_ne!(base[2], pert[2]);
    }

    #[test]
    fn resumed_stream_continues_identically() {
        let cfg = small(3, PastSize::Frames(2));
        let w = DecoderWeights::init(&cfg, 8).unwrap();
        let chunks = split_chunks(&features(14, 8, 2), 3).unwrap();
        let full = decode_incremental(&concat_chunks(&chunks).unwrap(), &cfg, &w).unwrap();
        let mut a = IncrementalDecoder::new(&cfg, &w).unwrap();
        a.step(&chunks[0]).unwrap();
        a.step(&chunks[1]).unwrap();
        let mut b = IncrementalDecoder::with_state(&cfg, &w, a.into_state()).unwrap();
        for (c, want) in chunks[2..].iter().zip(&full[2..]) {
            assert_eq!(&b.step(c).unwrap(), want);
        }
    }

    #[test]
    fn zero_past_attention_is_chunk_local() {
        let cfg = small(4, PastSize::Frames(0));
        let w = DecoderWeights::init(&cfg, 6).unwrap();
        let x = features(12, 8, 6);
        let mut y = x.clone();
        for v in &mut y.data_mut()[..4 * 8] {
            *v = -*v;
        }
        let mask = build_static_mask(12, 4, cfg.past_size).unwrap();
        let (_, ta) = decode_parallel_with_taps(&x, &cfg, &w, Some(&mask)).unwrap();
        let (_, tb) = decode_parallel_with_taps(&y, &cfg, &w, Some(&mask)).unwrap();
        // first layer: chunk 1 attention output ignores chunk 0 entirely
        let a = tensor::slice_time(&ta[0], 4, 4).unwrap();
        let b = tensor::slice_time(&tb[0], 4, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_changes_output_only_when_something_is_dropped() {
        let cfg = DecoderConfig {
            kernel1: 1,
            kernel2: 1,
            ..small(3, PastSize::Frames(3))
        };
        let w = DecoderWeights::init(&cfg, 3).unwrap();
        let x = features(12, 8, 4);
        let intact = decode_incremental(&x, &cfg, &w).unwrap();
        assert_eq!(decode_incremental_with(&x, &cfg, &w, Ablation::DropConv).unwrap(), intact);
        assert_ne!(decode_incremental_with(&x, &cfg, &w, Ablation::DropKv).unwrap(), intact);
    }

    #[test]
    fn rejects_bad_chunks() {
        let cfg = small(3, PastSize::Frames(3));
        let w = DecoderWeights::init(&cfg, 3).unwrap();
        let mut dec = IncrementalDecoder::new(&cfg, &w).unwrap();
        assert!(dec.step(&features(4, 8, 0)).is_err());
        assert!(dec.step(&features(2, 7, 0)).is_err());
        assert!(dec.step(&Tensor::zeros(&[0, 8])).is_err());
    }
}

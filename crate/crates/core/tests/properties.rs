use chunkfft::decoder::concat_chunks;
use chunkfft::{
    build_static_mask, decode_incremental, decode_parallel_masked, DecoderConfig, DecoderWeights, PastSize, Tensor,
};
use proptest::prelude::*;

fn config(n_layers: usize, n_heads: usize, chunk: usize, past: Option<usize>, k1: usize, k2: usize) -> DecoderConfig {
    DecoderConfig {
        n_layers,
        n_heads,
        d_model: 4 * n_heads,
        d_ff: 6,
        kernel1: k1,
        kernel2: k2,
        chunk_size: chunk,
        past_size: past.map_or(PastSize::All, PastSize::Frames),
        mel_bins: 3,
        ..DecoderConfig::default()
    }
}

fn features(frames: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(frames, d, |r, c| ((seed as f64 + 1.0) * (r * d + c) as f64 * 0.618).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn incremental_equals_masked_parallel(
        n_layers in 1usize..4,
        n_heads in 1usize..3,
        chunk in 1usize..7,
        past in proptest::option::of(0usize..12),
        k1 in 1usize..5,
        k2 in 1usize..5,
        frames in 1usize..30,
        seed in 0u64..1000,
    ) {
        let cfg = config(n_layers, n_heads, chunk, past, k1, k2);
        let w = DecoderWeights::<f64>::init(&cfg, seed).unwrap();
        let x = features(frames, cfg.d_model, seed);
        let inc = concat_chunks(&decode_incremental(&x, &cfg, &w).unwrap()).unwrap();
        let mask = build_static_mask(frames, chunk, cfg.past_size).unwrap();
        let par = decode_parallel_masked(&x, &cfg, &w, &mask).unwrap();
        prop_assert!(inc.max_abs_diff(&par).unwrap() <= 1e-9);
    }

    /// Chunks that end before a perturbed frame do not see it.
    #[test]
    fn later_frames_never_reach_earlier_chunks(
        chunk in 1usize..6,
        past in proptest::option::of(0usize..10),
        frames in 2usize..24,
        at in 0usize..24,
        seed in 0u64..1000,
    ) {
        let at = at % frames;
        let cfg = config(2, 2, chunk, past, 3, 3);
        let w = DecoderWeights::<f64>::init(&cfg, seed).unwrap();
        let x = features(frames, cfg.d_model, seed);
        let mut y = x.clone();
        y.data_mut()[at * cfg.d_model] += 1.0;
        let a = concat_chunks(&decode_incremental(&x, &cfg, &w).unwrap()).unwrap();
        let b = concat_chunks(&decode_incremental(&y, &cfg, &w).unwrap()).unwrap();
        let safe = (at / chunk) * chunk;
        for r in 0..safe {
            for c in 0..cfg.mel_bins {
                prop_assert_eq!(a.at(r, c).to_bits(), b.at(r, c).to_bits());
            }
        }
        // the perturbed frame's own output row does move
        prop_assert!((0..cfg.mel_bins).any(|c| a.at(at, c) != b.at(at, c)));
    }
}

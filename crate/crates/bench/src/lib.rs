//! Fixtures shared by the decoding benchmarks.

use chunkfft::{DecoderConfig, DecoderWeights, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomly initialised default model.
pub fn model(chunk: usize) -> (DecoderConfig, DecoderWeights<f64>) {
    let cfg = DecoderConfig {
        chunk_size: chunk,
        ..DecoderConfig::default()
    };
    let w = DecoderWeights::init(&cfg, 0).expect("default config is valid");
    (cfg, w)
}

/// Uniform `[-1, 1)` features of `frames × d_model`.
pub fn features(cfg: &DecoderConfig, frames: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Tensor::from_fn(frames, cfg.d_model, |_, _| rng.gen_range(-1.0..1.0))
}

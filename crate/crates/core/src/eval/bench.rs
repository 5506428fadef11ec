//! Wall-clock latency of incremental versus full-sequence decoding.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_parallel, split_chunks, DecoderConfig, DecoderWeights, IncrementalDecoder};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const HOP_LENGTH: usize = 256;
pub const SAMPLE_RATE: usize = 22050;

/// Seconds of audio that `frames` mel frames stand for.
pub fn audio_duration(frames: usize) -> f64 {
    (frames * HOP_LENGTH) as f64 / SAMPLE_RATE as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub frames: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 600,
            repeats: 10,
            warmup: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub first_ms: f64,
    pub last_ms: f64,
    pub parallel_ms: f64,
    pub total_frames: usize,
    pub chunks: usize,
    pub audio_duration_s: f64,
    /// Last-chunk latency over audio duration.
    pub rtf: f64,
    pub rtf_parallel: f64,
    pub repeats: usize,
    pub warmup: usize,
    /// Median latency of each chunk index across repeats, in ms.
    pub chunk_median_ms: Vec<f64>,
    /// Over all per-chunk medians after the first chunk.
    pub chunk_percentiles_ms: Percentiles,
}

impl BenchResult {
    /// Median latency of the 1-based chunk `n`.
    pub fn chunk_ms(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.chunk_median_ms.get(i)).copied()
    }
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Times a full incremental run and a full-sequence run `repeats` times
/// each, after `warmup` untimed rounds.
pub fn bench<S: Scalar>(cfg: &DecoderConfig, weights: &DecoderWeights<S>, bc: &BenchConfig) -> Result<BenchResult> {
    if bc.frames == 0 || bc.repeats == 0 {
        return Err(Error::Config("bench needs frames and repeats".into()));
    }
    weights.validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let features: Tensor<S> = Tensor::<f64>::from_fn(bc.frames, cfg.d_model, |_, _| rng.gen_range(-1.0..1.0)).cast();
    let chunks = split_chunks(&features, cfg.chunk_size)?;
    let mut per_chunk: Vec<Vec<f64>> = vec![Vec::with_capacity(bc.repeats); chunks.len()];
    let mut parallel = Vec::with_capacity(bc.repeats);
    for round in 0..bc.warmup + bc.repeats {
        let timed = round >= bc.warmup;
        let mut dec = IncrementalDecoder::new(cfg, weights)?;
        for (i, c) in chunks.iter().enumerate() {
            let t0 = Instant::now();
            let y = dec.step(c)?;
            let dt = ms(t0);
            std::hint::black_box(y);
            if timed {
                per_chunk[i].push(dt);
            }
        }
        let t0 = Instant::now();
        let y = decode_parallel(&features, cfg, weights)?;
        let dt = ms(t0);
        std::hint::black_box(y);
        if timed {
            parallel.push(dt);
        }
    }
    let chunk_median_ms: Vec<f64> = per_chunk.iter().map(|v| median(v)).collect();
    let steady = if chunk_median_ms.len() > 1 { &chunk_median_ms[1..] } else { &chunk_median_ms[..] };
    let duration = audio_duration(bc.frames);
    let first_ms = chunk_median_ms[0];
    let last_ms = *chunk_median_ms.last().expect("at least one chunk");
    let parallel_ms = median(&parallel);
    Ok(BenchResult {
        first_ms,
        last_ms,
        parallel_ms,
        total_frames: bc.frames,
        chunks: chunks.len(),
        audio_duration_s: duration,
        rtf: last_ms / 1e3 / duration,
        rtf_parallel: parallel_ms / 1e3 / duration,
        repeats: bc.repeats,
        warmup: bc.warmup,
        chunk_percentiles_ms: Percentiles {
            p50: percentile(steady, 50.0),
            p90: percentile(steady, 90.0),
            p99: percentile(steady, 99.0),
        },
        chunk_median_ms,
    })
}

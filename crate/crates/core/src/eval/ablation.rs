//! Cache ablation: drop the attention cache, the conv state, or both after
//! every chunk and measure how far the output moves and how much it jumps at
//! chunk boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{concat_chunks, decode_incremental_with, Ablation, DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::task::{SyntheticTask, TaskConfig};

/// Mean absolute frame-to-frame change at chunk starts and elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpStats {
    pub boundary: f64,
    pub interior: f64,
}

pub fn jump_stats(mel: &Tensor<f64>, chunk: usize) -> Result<JumpStats> {
    let (t, bins) = mel.dims2()?;
    if chunk == 0 || bins == 0 {
        return Err(Error::Config("chunk and bins must be positive".into()));
    }
    let (mut b, mut nb, mut i, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for f in 1..t {
        let d = mel
            .row(f)
            .iter()
            .zip(mel.row(f - 1))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / bins as f64;
        if f % chunk == 0 {
            b += d;
            nb += 1;
        } else {
            i += d;
            ni += 1;
        }
    }
    if nb == 0 || ni == 0 {
        return Err(Error::Config(format!("{t} frames give no boundary or interior pairs at chunk {chunk}")));
    }
    Ok(JumpStats {
        boundary: b / nb as f64,
        interior: i / ni as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub max_abs_diff: f64,
    pub intact: JumpStats,
    pub ablated: JumpStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub mode: Ablation,
    pub frames: usize,
    pub threshold: f64,
    pub per_seed: Vec<AblationSeed>,
    /// Share of seeds whose max |Δ| exceeds the threshold.
    pub changed_fraction: f64,
    pub mean_boundary_intact: f64,
    pub mean_boundary_ablated: f64,
}

impl AblationReport {
    pub fn boundary_jump_grows(&self) -> bool {
        self.mean_boundary_ablated > self.mean_boundary_intact
    }
}

pub fn ablation_check(cfg: &DecoderConfig, seeds: &[u64], mode: Ablation, frames: usize, threshold: f64) -> Result<AblationReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let task = SyntheticTask::new(
        TaskConfig {
            seq_len: frames,
            ..TaskConfig::default()
        },
        cfg.d_model,
        cfg.mel_bins,
    )?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let weights = DecoderWeights::<f64>::init(cfg, seed)?;
        let x = task.sample_features(frames, &mut ChaCha8Rng::seed_from_u64(seed));
        let intact = concat_chunks(&decode_incremental_with(&x, cfg, &weights, Ablation::None)?)?;
        let ablated = concat_chunks(&decode_incremental_with(&x, cfg, &weights, mode)?)?;
        per_seed.push(AblationSeed {
            seed,
            max_abs_diff: intact.max_abs_diff(&ablated)?,
            intact: jump_stats(&intact, cfg.chunk_size)?,
            ablated: jump_stats(&ablated, cfg.chunk_size)?,
        });
    }
    let n = per_seed.len() as f64;
    Ok(AblationReport {
        mode,
        frames,
        threshold,
        changed_fraction: per_seed.iter().filter(|s| s.max_abs_diff > threshold).count() as f64 / n,
        mean_boundary_intact: per_seed.iter().map(|s| s.intact.boundary).sum::<f64>() / n,
        mean_boundary_ablated: per_seed.iter().map(|s| s.ablated.boundary).sum::<f64>() / n,
        per_seed,
    })
}

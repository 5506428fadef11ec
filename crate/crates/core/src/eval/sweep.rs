//! Incremental versus masked-parallel equivalence over a configuration grid.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{concat_chunks, decode_incremental, decode_parallel_masked, DecoderConfig, DecoderWeights};
use crate::error::Result;
use crate::mask::{build_static_mask, PastSize};
use crate::tensor::{DType, Scalar, Tensor};

/// Past sizes as functions of the chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastRule {
    Zero,
    HalfChunkCeil,
    Chunk,
    TwiceChunkPlusOne,
    All,
}

impl PastRule {
    pub fn resolve(self, chunk: usize) -> PastSize {
        match self {
            PastRule::Zero => PastSize::Frames(0),
            PastRule::HalfChunkCeil => PastSize::Frames(chunk.div_ceil(2)),
            PastRule::Chunk => PastSize::Frames(chunk),
            PastRule::TwiceChunkPlusOne => PastSize::Frames(2 * chunk + 1),
            PastRule::All => PastSize::All,
        }
    }
}

/// Sequence lengths as functions of the chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramesRule {
    One,
    Chunk,
    ThreeChunksPlusTwo,
    Fixed(usize),
}

impl FramesRule {
    pub fn resolve(self, chunk: usize) -> usize {
        match self {
            FramesRule::One => 1,
            FramesRule::Chunk => chunk,
            FramesRule::ThreeChunksPlusTwo => 3 * chunk + 2,
            FramesRule::Fixed(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub n_layers: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub d_model: Vec<usize>,
    pub chunk: Vec<usize>,
    pub past: Vec<PastRule>,
    pub frames: Vec<FramesRule>,
    pub kernels: (usize, usize),
    pub mel_bins: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            n_layers: vec![1, 2, 3],
            n_heads: vec![1, 2, 4],
            d_model: vec![8, 16, 32],
            chunk: vec![1, 4, 7, 30],
            past: vec![
                PastRule::Zero,
                PastRule::HalfChunkCeil,
                PastRule::Chunk,
                PastRule::TwiceChunkPlusOne,
            ],
            frames: vec![
                FramesRule::One,
                FramesRule::Chunk,
                FramesRule::ThreeChunksPlusTwo,
                FramesRule::Fixed(50),
            ],
            kernels: (3, 3),
            mel_bins: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepCell {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub chunk: usize,
    pub past: PastSize,
    pub frames: usize,
}

impl SweepCell {
    pub fn decoder_config(&self, grid: &SweepGrid, dtype: DType) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: 2 * self.d_model,
            kernel1: grid.kernels.0,
            kernel2: grid.kernels.1,
            chunk_size: self.chunk,
            past_size: self.past,
            mel_bins: grid.mel_bins,
            dtype,
            ..DecoderConfig::default()
        }
    }
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers={} heads={} d_model={} chunk={} past={} frames={}",
            self.n_layers, self.n_heads, self.d_model, self.chunk, self.past, self.frames
        )
    }
}

impl SweepGrid {
    /// Distinct cells; rules that collapse to the same value are not repeated.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &n_layers in &self.n_layers {
            for &n_heads in &self.n_heads {
                for &d_model in &self.d_model {
                    if d_model % n_heads != 0 {
                        continue;
                    }
                    for &chunk in &self.chunk {
                        let mut pasts: Vec<PastSize> = self.past.iter().map(|r| r.resolve(chunk)).collect();
                        pasts.dedup();
                        let mut frames: Vec<usize> = self.frames.iter().map(|r| r.resolve(chunk)).collect();
                        frames.sort_unstable();
                        frames.dedup();
                        for &past in &pasts {
                            for &t in &frames {
                                out.push(SweepCell {
                                    n_layers,
                                    n_heads,
                                    d_model,
                                    chunk,
                                    past,
                                    frames: t,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub seed: u64,
    pub max_abs_diff: f64,
    /// `(frame, bin)` of the largest difference.
    pub argmax: (usize, usize),
}

impl fmt::Display for CellResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed={}: max |Δ| = {:.3e} at frame {}, bin {}",
            self.cell, self.seed, self.max_abs_diff, self.argmax.0, self.argmax.1
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: SweepGrid,
    pub dtype: DType,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub grid_results: Vec<CellResult>,
    pub max_abs_diff: f64,
    pub passed: bool,
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.grid_results.iter().filter(move |r| !(r.max_abs_diff <= self.tolerance))
    }

    pub fn worst(&self) -> Option<&CellResult> {
        self.grid_results
            .iter()
            .max_by(|a, b| a.max_abs_diff.total_cmp(&b.max_abs_diff))
    }
}

pub fn default_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-9,
        DType::F32 => 1e-4,
    }
}

fn max_diff_at<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> (f64, (usize, usize)) {
    let cols = a.shape().get(1).copied().unwrap_or(1).max(1);
    let mut best = (0.0, (0, 0));
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let d = (x.as_f64() - y.as_f64()).abs();
        if d > best.0 || d.is_nan() {
            best = (if d.is_nan() { f64::INFINITY } else { d }, (i / cols, i % cols));
        }
    }
    best
}

/// Runs one cell: random weights and features from `seed`, both decoders, max difference.
pub fn equivalence_cell<S: Scalar>(grid: &SweepGrid, cell: &SweepCell, seed: u64) -> Result<CellResult> {
    let cfg = cell.decoder_config(grid, S::DTYPE);
    let weights: DecoderWeights<S> = DecoderWeights::<f64>::init(&cfg, seed)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let features: Tensor<S> = Tensor::<f64>::from_fn(cell.frames, cell.d_model, |_, _| rng.gen_range(-1.0..1.0)).cast();
    let inc = concat_chunks(&decode_incremental(&features, &cfg, &weights)?)?;
    let mask = build_static_mask(cell.frames, cell.chunk, cell.past)?;
    let par = decode_parallel_masked(&features, &cfg, &weights, &mask)?;
    let (max_abs_diff, argmax) = max_diff_at(&inc, &par);
    Ok(CellResult {
        cell: *cell,
        seed,
        max_abs_diff,
        argmax,
    })
}

pub fn equivalence_sweep<S: Scalar>(grid: &SweepGrid, seeds: &[u64], tolerance: f64) -> Result<SweepReport> {
    let mut grid_results = Vec::new();
    for cell in grid.cells() {
        for &seed in seeds {
            grid_results.push(equivalence_cell::<S>(grid, &cell, seed)?);
        }
    }
    let max_abs_diff = grid_results.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let passed = !grid_results.is_empty() && grid_results.iter().all(|r| r.max_abs_diff <= tolerance);
    Ok(SweepReport {
        config: grid.clone(),
        dtype: S::DTYPE,
        seeds: seeds.to_vec(),
        tolerance,
        grid_results,
        max_abs_diff,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_size() {
        let cells = SweepGrid::default().cells();
        // chunk 1 collapses past {0,1,1,3} to 3 values and frames {1,1,5,50} to 3
        let per_arch = 3 * 3 + 3 * 4 * 4;
        assert_eq!(cells.len(), 27 * per_arch);
        assert!(cells.iter().any(|c| c.frames < c.chunk));
    }

    #[test]
    fn small_grid_passes_in_both_precisions() {
        let grid = SweepGrid {
            n_layers: vec![1, 2],
            n_heads: vec![1, 2],
            d_model: vec![8],
            chunk: vec![1, 4],
            mel_bins: 5,
            ..SweepGrid::default()
        };
        let r = equivalence_sweep::<f64>(&grid, &[0, 1], 1e-9).unwrap();
        assert!(r.passed, "{}", r.worst().unwrap());
        let r = equivalence_sweep::<f32>(&grid, &[0], 1e-4).unwrap();
        assert!(r.passed, "{}", r.worst().unwrap());
    }

    #[test]
    fn failure_output_names_the_cell() {
        let cell = SweepCell {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            chunk: 7,
            past: PastSize::Frames(4),
            frames: 23,
        };
        let r = CellResult {
            cell,
            seed: 9,
            max_abs_diff: 0.5,
            argmax: (17, 3),
        };
        let s = r.to_string();
        for part in ["layers=2", "heads=4", "d_model=16", "chunk=7", "past=4", "frames=23", "seed=9", "frame 17", "bin 3"] {
            assert!(s.contains(part), "{s}");
        }
    }

    #[test]
    fn argmax_locates_the_difference() {
        let a = Tensor::<f64>::zeros(&[3, 4]);
        let mut b = a.clone();
        b.data_mut()[2 * 4 + 1] = 1e-3;
        assert_eq!(max_diff_at(&a, &b), (1e-3, (2, 1)));
    }
}

//! Train under several mask regimes, then score each model under several
//! inference-time chunk/past settings.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::TaskConfig;
use super::trainer::{MaskRegime, TrainConfig, Trainer};
use crate::decoder::{decode_parallel_masked, DecoderConfig};
use crate::error::{Error, Result};
use crate::eval::msd::{msd_with, MsdKind};
use crate::mask::{build_static_mask, PastSize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub chunk: usize,
    pub past: PastSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub regimes: Vec<MaskRegime>,
    pub infer: Vec<InferConfig>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Samples scored per (model, inference config) cell.
    pub eval_samples: usize,
    pub metric: MsdKind,
    /// Smallest past-size gap that counts as grossly mismatched.
    pub mismatch_gap: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let stat = |past| MaskRegime::Static {
            chunk: 30,
            past: PastSize::Frames(past),
        };
        Self {
            regimes: vec![stat(0), stat(5), stat(15), stat(30)],
            infer: [0, 5, 15, 30, 90]
                .into_iter()
                .map(|p| InferConfig {
                    chunk: 30,
                    past: PastSize::Frames(p),
                })
                .collect(),
            seeds: vec![0, 1, 2],
            steps: 300,
            eval_samples: 8,
            metric: MsdKind::FrameL2,
            mismatch_gap: 85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub seed: u64,
    pub regime: String,
    pub infer_chunk: usize,
    pub infer_past: PastSize,
    pub msd: f64,
}

/// Matched versus most-mismatched inference for one static regime and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub seed: u64,
    pub regime: String,
    pub matched_msd: f64,
    pub mismatched_past: PastSize,
    pub mismatched_msd: f64,
    pub matched_wins: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub config: StudyConfig,
    pub rows: Vec<StudyRow>,
    pub trend: Vec<TrendCheck>,
}

impl StudyTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,train_regime,infer_chunk,infer_past,msd\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{:.6}", r.seed, r.regime, r.infer_chunk, r.infer_past, r.msd).expect("string write");
        }
        s
    }

    /// Mean distance per (regime, inference config) across seeds.
    pub fn mean_grid(&self) -> Vec<(String, InferConfig, f64)> {
        let mut out: Vec<(String, InferConfig, f64, usize)> = Vec::new();
        for r in &self.rows {
            let key = InferConfig {
                chunk: r.infer_chunk,
                past: r.infer_past,
            };
            match out.iter_mut().find(|(g, i, _, _)| *g == r.regime && *i == key) {
                Some(e) => {
                    e.2 += r.msd;
                    e.3 += 1;
                }
                None => out.push((r.regime.clone(), key, r.msd, 1)),
            }
        }
        out.into_iter().map(|(g, i, s, n)| (g, i, s / n as f64)).collect()
    }

    /// For each regime with trend checks: (regime, wins, total).
    pub fn trend_summary(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for c in &self.trend {
            match out.iter_mut().find(|(g, _, _)| *g == c.regime) {
                Some(e) => {
                    e.1 += c.matched_wins as usize;
                    e.2 += 1;
                }
                None => out.push((c.regime.clone(), c.matched_wins as usize, 1)),
            }
        }
        out
    }

    /// Every checked regime wins in a strict majority of seeds.
    pub fn trend_holds(&self) -> bool {
        let s = self.trend_summary();
        !s.is_empty() && s.iter().all(|(_, w, n)| 2 * w > *n)
    }
}

fn past_gap(a: PastSize, b: PastSize) -> Option<usize> {
    match (a, b) {
        (PastSize::Frames(x), PastSize::Frames(y)) => Some(x.abs_diff(y)),
        (PastSize::All, PastSize::All) => Some(0),
        _ => None,
    }
}

pub fn run_mask_study(model: &DecoderConfig, base: &TrainConfig, task: TaskConfig, study: &StudyConfig) -> Result<StudyTable> {
    if study.regimes.is_empty() || study.infer.is_empty() || study.seeds.is_empty() {
        return Err(Error::Config("study needs regimes, inference configs and seeds".into()));
    }
    let frames = task.seq_len;
    let masks = study
        .infer
        .iter()
        .map(|i| build_static_mask(frames, i.chunk, i.past))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut trend = Vec::new();
    for &seed in &study.seeds {
        for regime in &study.regimes {
            let train = TrainConfig {
                steps: study.steps,
                seed,
                regime: regime.clone(),
                ..base.clone()
            };
            let trainer = Trainer::new(model.clone(), train, task)?;
            let eval = trainer
                .task
                .generate_batch(frames, study.eval_samples, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))?;
            let (weights, _) = trainer.run()?;
            let label = regime.to_string();
            let mut cell = Vec::with_capacity(study.infer.len());
            for (inf, mask) in study.infer.iter().zip(&masks) {
                let mut total = 0.0;
                for (x, y) in eval.features.iter().zip(&eval.targets) {
                    let out = decode_parallel_masked(x, model, &weights, mask)?;
                    total += msd_with(&out, y, study.metric)?;
                }
                let d = total / eval.len() as f64;
                cell.push(d);
                rows.push(StudyRow {
                    seed,
                    regime: label.clone(),
                    infer_chunk: inf.chunk,
                    infer_past: inf.past,
                    msd: d,
                });
            }
            if let MaskRegime::Static { chunk, past } = regime {
                let same_chunk = |i: &InferConfig| i.chunk == *chunk;
                let matched = study.infer.iter().position(|i| same_chunk(i) && i.past == *past);
                let worst = study
                    .infer
                    .iter()
                    .enumerate()
                    .filter(|(_, i)| same_chunk(i))
                    .filter_map(|(k, i)| past_gap(i.past, *past).map(|g| (k, g)))
                    .filter(|&(_, g)| g >= study.mismatch_gap)
                    .max_by_key(|&(_, g)| g);
                if let (Some(m), Some((w, _))) = (matched, worst) {
                    trend.push(TrendCheck {
                        seed,
                        regime: label.clone(),
                        matched_msd: cell[m],
                        mismatched_past: study.infer[w].past,
                        mismatched_msd: cell[w],
                        matched_wins: cell[m] < cell[w],
                    });
                }
            }
        }
    }
    Ok(StudyTable {
        config: study.clone(),
        rows,
        trend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_study_has_full_shape() {
        let model = DecoderConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_ff: 4,
            mel_bins: 3,
            chunk_size: 2,
            past_size: PastSize::Frames(0),
            ..DecoderConfig::default()
        };
        let task = TaskConfig {
            seq_len: 10,
            ..TaskConfig::default()
        };
        let st = |p| MaskRegime::Static {
            chunk: 2,
            past: PastSize::Frames(p),
        };
        let study = StudyConfig {
            regimes: vec![st(0), st(2)],
            infer: [0, 2, 8]
                .into_iter()
                .map(|p| InferConfig {
                    chunk: 2,
                    past: PastSize::Frames(p),
                })
                .collect(),
            seeds: vec![1, 2],
            steps: 2,
            eval_samples: 2,
            mismatch_gap: 7,
            ..StudyConfig::default()
        };
        let base = TrainConfig {
            batch_size: 2,
            eval_batch: 2,
            ..TrainConfig::default()
        };
        let t = run_mask_study(&model, &base, task, &study).unwrap();
        assert_eq!(t.rows.len(), 2 * 2 * 3);
        assert_eq!(t.mean_grid().len(), 6);
        // only past 0 has a partner 8 frames away with the same chunk
        assert_eq!(t.trend.len(), 2);
        assert!(t.trend.iter().all(|c| c.regime == "static(2,0)"));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("seed,train_regime,infer_chunk,infer_past,msd\n1,static(2,0),2,0,"));
        assert_eq!(t, run_mask_study(&model, &base, task, &study).unwrap());
    }
}

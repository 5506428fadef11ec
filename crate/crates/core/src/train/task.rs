//! Synthetic sequence-to-sequence task.
//!
//! Inputs are smooth multi-sinusoid signals; the target for frame `t` is a
//! fixed linear readout of `x[t] + 0.5·x[t−3]·B + 0.25·x[t−8]·B`, with
//! frames before the start treated as zero. Targets are scaled to unit
//! variance on a reference batch and clamped to [−4, 4].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// `(lag, weight)` pairs; lag 0 is applied directly, the others through `B`.
pub const LAG_TAPS: [(usize, f64); 3] = [(0, 1.0), (3, 0.5), (8, 0.25)];
pub const SINUSOIDS_PER_DIM: usize = 4;
pub const TARGET_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub seed: u64,
    pub seq_len: usize,
    /// Lowest and highest sinusoid frequency, in cycles per frame.
    pub freq_range: (f64, f64),
    /// Per-sinusoid amplitude range, within [0, 1].
    pub amp_range: (f64, f64),
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            seq_len: 96,
            freq_range: (0.002, 0.01),
            amp_range: (0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub d_model: usize,
    pub mel_bins: usize,
    /// `[d_model × mel_bins]`
    pub a: Tensor<f64>,
    /// `[d_model × d_model]`
    pub b: Tensor<f64>,
    /// Per-dim frequencies, `[d_model × SINUSOIDS_PER_DIM]`.
    pub freqs: Tensor<f64>,
    /// Raw targets are divided by this.
    pub gain: f64,
}

/// One batch: per-sample features `[T × d_model]` and targets `[T × mel_bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Tensor<f64>>,
    pub targets: Vec<Tensor<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl SyntheticTask {
    pub fn new(config: TaskConfig, d_model: usize, mel_bins: usize) -> Result<Self> {
        let (f0, f1) = config.freq_range;
        let (a0, a1) = config.amp_range;
        if d_model == 0 || mel_bins == 0 || config.seq_len == 0 {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        if !(0.0 < f0 && f0 <= f1 && f1 <= 0.5) {
            return Err(Error::Config(format!("bad frequency range {:?}", config.freq_range)));
        }
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!(
                "bad amplitude range {:?} (must lie within [0, 1])",
                config.amp_range
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sa = 1.0 / (d_model as f64).sqrt();
        let a = Tensor::from_fn(d_model, mel_bins, |_, _| rng.gen_range(-sa..sa) * 3f64.sqrt());
        let b = Tensor::from_fn(d_model, d_model, |_, _| rng.gen_range(-sa..sa) * 3f64.sqrt());
        let freqs = Tensor::from_fn(d_model, SINUSOIDS_PER_DIM, |_, _| rng.gen_range(f0..=f1));
        let mut task = Self {
            config,
            d_model,
            mel_bins,
            a,
            b,
            freqs,
            gain: 1.0,
        };
        let reference = task.generate_batch(config.seq_len, 16, &mut rng)?;
        let (mut ss, mut n) = (0.0, 0usize);
        for y in &reference.targets {
            ss += y.data().iter().map(|v| v * v).sum::<f64>();
            n += y.len();
        }
        task.gain = (ss / n as f64).sqrt();
        if !(task.gain > 0.0) {
            return Err(Error::Config("degenerate task: zero target variance".into()));
        }
        Ok(task)
    }

    /// Random-phase, random-amplitude input signal.
    pub fn sample_features<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Tensor<f64> {
        let (a0, a1) = self.config.amp_range;
        let mut comps = Vec::with_capacity(self.d_model * SINUSOIDS_PER_DIM);
        for _ in 0..self.d_model * SINUSOIDS_PER_DIM {
            let amp = if a1 > a0 { rng.gen_range(a0..a1) } else { a0 };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            comps.push((amp, phase));
        }
        Tensor::from_fn(len, self.d_model, |t, j| {
            (0..SINUSOIDS_PER_DIM)
                .map(|s| {
                    let (amp, phase) = comps[j * SINUSOIDS_PER_DIM + s];
                    let f = self.freqs.at(j, s);
                    amp * (std::f64::consts::TAU * f * t as f64 + phase).sin()
                })
                .sum()
        })
    }

    /// Targets for a given input sequence.
    pub fn targets(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (t, d) = x.dims2()?;
        if d != self.d_model {
            return Err(Error::shape("targets", format!("{d} input dims, task has {}", self.d_model)));
        }
        let xb = tensor::matmul(x, &self.b)?;
        let z = Tensor::from_fn(t, d, |i, j| {
            LAG_TAPS
                .iter()
                .map(|&(lag, wt)| match (lag, i.checked_sub(lag)) {
                    (0, _) => wt * x.at(i, j),
                    (_, Some(src)) => wt * xb.at(src, j),
                    (_, None) => 0.0,
                })
                .sum()
        });
        let y = tensor::matmul(&z, &self.a)?;
        let inv = 1.0 / self.gain;
        Ok(y.map(|v| (v * inv).clamp(-TARGET_CLAMP, TARGET_CLAMP)))
    }

    pub fn generate_batch<R: Rng + ?Sized>(&self, len: usize, batch: usize, rng: &mut R) -> Result<Batch> {
        let mut features = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for _ in 0..batch {
            let x = self.sample_features(len, rng);
            targets.push(self.targets(&x)?);
            features.push(x);
        }
        Ok(Batch { features, targets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig::default(), 6, 5).unwrap()
    }

    #[test]
    fn same_seed_same_batch() {
        let t = task();
        let a = t.generate_batch(20, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = t.generate_batch(20, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(task(), t);
    }

    #[test]
    fn inputs_are_bounded() {
        let t = task();
        let x = t.sample_features(200, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(x.data().iter().all(|v| v.abs() <= SINUSOIDS_PER_DIM as f64));
    }

    #[test]
    fn targets_match_direct_recomputation() {
        let t = task();
        let x = t.sample_features(15, &mut ChaCha8Rng::seed_from_u64(3));
        let y = t.targets(&x).unwrap();
        for i in 0..15 {
            for m in 0..t.mel_bins {
                let mut acc = 0.0;
                for j in 0..t.d_model {
                    let mut z = x.at(i, j);
                    for (lag, wt) in [(3usize, 0.5), (8, 0.25)] {
                        if i >= lag {
                            for q in 0..t.d_model {
                                z += wt * x.at(i - lag, q) * t.b.at(q, j);
                            }
                        }
                    }
                    acc += z * t.a.at(j, m);
                }
                let want = (acc / t.gain).clamp(-4.0, 4.0);
                assert!((y.at(i, m) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_frame_uses_only_the_current_input() {
        let t = task();
        let x = t.sample_features(9, &mut ChaCha8Rng::seed_from_u64(4));
        let y = t.targets(&x).unwrap();
        let direct = tensor::matmul(&tensor::slice_time(&x, 0, 1).unwrap(), &t.a).unwrap();
        for m in 0..t.mel_bins {
            assert!((y.at(0, m) - direct.at(0, m) / t.gain).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_depend_on_at_most_eight_frames_back() {
        let t = task();
        let x = t.sample_features(30, &mut ChaCha8Rng::seed_from_u64(5));
        let mut x2 = x.clone();
        for j in 0..t.d_model {
            x2.data_mut()[10 * t.d_model + j] += 1.0;
        }
        let (y, y2) = (t.targets(&x).unwrap(), t.targets(&x2).unwrap());
        for i in 0..30 {
            let changed = (0..t.mel_bins).any(|m| y.at(i, m) != y2.at(i, m));
            assert_eq!(changed, [10, 13, 18].contains(&i), "frame {i}");
        }
    }

    #[test]
    fn targets_are_standardized() {
        let t = task();
        let b = t.generate_batch(96, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let all: Vec<f64> = b.targets.iter().flat_map(|y| y.data().to_vec()).collect();
        let rms = (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).sqrt();
        assert!((0.7..1.3).contains(&rms), "rms {rms}");
        assert!(all.iter().all(|v| v.abs() <= 4.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = TaskConfig {
            amp_range: (0.5, 1.5),
            ..TaskConfig::default()
        };
        assert!(SyntheticTask::new(bad, 4, 4).is_err());
        let bad = TaskConfig {
            freq_range: (0.0, 0.1),
            ..TaskConfig::default()
        };
        assert!(SyntheticTask::new(bad, 4, 4).is_err());
    }
}

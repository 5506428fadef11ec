//! Receptive-field-constrained training on the synthetic task.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig, ClipInfo};
use super::task::{Batch, SyntheticTask, TaskConfig};
use crate::autodiff::{forward_record, Gradients, Ops, ParamSet, Tape, Var};
use crate::decoder::{decoder_program, DecoderConfig, DecoderParams, DecoderWeights};
use crate::error::{Error, Result};
use crate::mask::{build_static_mask, ChunkMask, DynamicMaskPolicy, PastSize};
use crate::tensor::{self, Tensor};

/// Which attention mask each training sample gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskRegime {
    /// No mask at all.
    Full,
    /// One fixed chunk mask for every sample.
    Static { chunk: usize, past: PastSize },
    /// A fresh `(chunk, past)` draw per sample.
    Dynamic { policy: DynamicMaskPolicy },
}

impl Default for MaskRegime {
    fn default() -> Self {
        let d = DecoderConfig::default();
        MaskRegime::Static {
            chunk: d.chunk_size,
            past: d.past_size,
        }
    }
}

impl fmt::Display for MaskRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskRegime::Full => write!(f, "full"),
            MaskRegime::Static { chunk, past } => write!(f, "static({chunk},{past})"),
            MaskRegime::Dynamic { .. } => write!(f, "dynamic"),
        }
    }
}

impl MaskRegime {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskRegime::Full => Ok(()),
            MaskRegime::Static { chunk, .. } if *chunk == 0 => Err(Error::Config("static chunk must be at least 1".into())),
            MaskRegime::Static { .. } => Ok(()),
            MaskRegime::Dynamic { policy } => policy.validate(),
        }
    }

    /// Masks for one batch; `None` means unmasked.
    pub fn draw<R: Rng + ?Sized>(&self, frames: usize, batch: usize, rng: &mut R) -> Result<Vec<Option<ChunkMask>>> {
        match self {
            MaskRegime::Full => Ok(vec![None; batch]),
            MaskRegime::Static { chunk, past } => {
                let m = build_static_mask(frames, *chunk, *past)?;
                Ok(vec![Some(m); batch])
            }
            MaskRegime::Dynamic { policy } => (0..batch)
                .map(|_| {
                    let (c, p) = policy.sample_sizes(rng);
                    build_static_mask(frames, c, p).map(Some)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub regime: MaskRegime,
    pub seed: u64,
    /// Size of the fixed held-out batch used for the before/after loss.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 8,
            steps: 2000,
            regime: MaskRegime::default(),
            seed: 0,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.regime.validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaskDraw {
    pub chunk: usize,
    pub past: PastSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    /// One entry per sample; empty when unmasked.
    pub masks: Vec<MaskDraw>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub train: TrainConfig,
    pub model: DecoderConfig,
    pub task: TaskConfig,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn loss_ratio(&self) -> f64 {
        self.final_eval_loss / self.initial_eval_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub clip: ClipInfo,
}

fn params_as_vars(cfg: &DecoderConfig, vars: &BTreeMap<String, Var>) -> Result<DecoderParams<Var>> {
    DecoderParams::build(cfg.n_layers, |name| {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    })
}

/// Records the masked decoder plus MSE for one sample.
pub fn loss_program<'a>(
    cfg: &'a DecoderConfig,
    features: &Tensor<f64>,
    target: &Tensor<f64>,
    mask: Option<&'a ChunkMask>,
) -> impl Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var> + 'a {
    let (features, target) = (features.clone(), target.clone());
    move |tape, vars| {
        let p = params_as_vars(cfg, vars)?;
        let x = tape.leaf(features.clone());
        let y = decoder_program(tape, cfg, &x, &p, mask, None)?;
        let t = tape.leaf(target.clone());
        tape.mse(&y, &t)
    }
}

/// Mean per-sample loss and its gradient, samples summed in order.
pub fn batch_gradients(
    cfg: &DecoderConfig,
    params: &ParamSet<f64>,
    batch: &Batch,
    masks: &[Option<ChunkMask>],
) -> Result<(f64, Gradients<f64>)> {
    if batch.is_empty() || masks.len() != batch.len() {
        return Err(Error::Config(format!("{} samples, {} masks", batch.len(), masks.len())));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total: Option<Gradients<f64>> = None;
    let mut loss = 0.0;
    for ((x, y), m) in batch.features.iter().zip(&batch.targets).zip(masks) {
        let (out, tape) = forward_record(loss_program(cfg, x, y, m.as_ref()), params)?;
        loss += tape.get(out).data()[0] * inv;
        let g = tape.backward(out, &Tensor::scalar(inv))?.params();
        total = Some(match total {
            None => g,
            Some(mut acc) => {
                for (k, v) in acc.0.iter_mut() {
                    *v = tensor::add(v, g.get(k).expect("same parameter set"))?;
                }
                acc
            }
        });
    }
    Ok((loss, total.expect("non-empty batch")))
}

/// Forward-only mean loss.
pub fn batch_loss(
    cfg: &DecoderConfig,
    weights: &DecoderWeights<f64>,
    batch: &Batch,
    mask: Option<&ChunkMask>,
) -> Result<f64> {
    let mut loss = 0.0;
    for (x, y) in batch.features.iter().zip(&batch.targets) {
        let out = decoder_program(&mut crate::autodiff::Eager, cfg, x, weights, mask, None)?;
        loss += tensor::mse(&out, y)?;
    }
    Ok(loss / batch.len() as f64)
}

/// One optimizer step on `params`.
pub fn train_step(
    cfg: &DecoderConfig,
    params: &mut ParamSet<f64>,
    batch: &Batch,
    masks: &[Option<ChunkMask>],
    opt: &mut Adam,
) -> Result<StepStats> {
    let (loss, grads) = batch_gradients(cfg, params, batch, masks)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: opt.steps_taken() as usize + 1,
            loss,
        });
    }
    let clip = opt.update(params, grads)?;
    Ok(StepStats { loss, clip })
}

/// A full training run, driven by one seeded generator.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    params: ParamSet<f64>,
    opt: Adam,
    rng: ChaCha8Rng,
    eval: Batch,
    eval_mask: Option<ChunkMask>,
}

impl Trainer {
    pub fn new(model: DecoderConfig, train: TrainConfig, task_cfg: TaskConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let task = SyntheticTask::new(task_cfg, model.d_model, model.mel_bins)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let weights = DecoderWeights::<f64>::init(&model, rng.next_u64())?;
        let eval = task.generate_batch(task_cfg.seq_len, train.eval_batch, &mut rng)?;
        let eval_mask = match &train.regime {
            MaskRegime::Full => None,
            MaskRegime::Static { chunk, past } => Some(build_static_mask(task_cfg.seq_len, *chunk, *past)?),
            MaskRegime::Dynamic { .. } => Some(build_static_mask(task_cfg.seq_len, model.chunk_size, model.past_size)?),
        };
        Ok(Self {
            opt: Adam::new(train.optimizer)?,
            params: weights.to_param_set(),
            model,
            train,
            task,
            rng,
            eval,
            eval_mask,
        })
    }

    pub fn weights(&self) -> Result<DecoderWeights<f64>> {
        DecoderWeights::from_param_set(&self.model, self.params.clone())
    }

    /// Mean loss on the fixed held-out batch under the evaluation mask.
    pub fn eval_loss(&self) -> Result<f64> {
        batch_loss(&self.model, &self.weights()?, &self.eval, self.eval_mask.as_ref())
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let t = self.task.config.seq_len;
        let batch = self.task.generate_batch(t, self.train.batch_size, &mut self.rng)?;
        let masks = self.train.regime.draw(t, self.train.batch_size, &mut self.rng)?;
        let stats = train_step(&self.model, &mut self.params, &batch, &masks, &mut self.opt)?;
        Ok(StepLog {
            step: self.opt.steps_taken() as usize,
            loss: stats.loss,
            grad_norm: stats.clip.norm_before,
            clipped: stats.clip.clipped,
            masks: masks
                .iter()
                .flatten()
                .map(|m| MaskDraw {
                    chunk: m.chunk_size(),
                    past: m.past(),
                })
                .collect(),
        })
    }

    /// Runs every configured step and returns the final weights with the log.
    pub fn run(mut self) -> Result<(DecoderWeights<f64>, TrainLog)> {
        let initial_eval_loss = self.eval_loss()?;
        let mut steps = Vec::with_capacity(self.train.steps);
        for _ in 0..self.train.steps {
            steps.push(self.step()?);
        }
        let final_eval_loss = self.eval_loss()?;
        let log = TrainLog {
            train: self.train.clone(),
            model: self.model.clone(),
            task: self.task.config,
            initial_eval_loss,
            final_eval_loss,
            steps,
        };
        Ok((self.weights()?, log))
    }
}

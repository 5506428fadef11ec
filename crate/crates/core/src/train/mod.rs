//! Toy-scale training: synthetic data, Adam, masked training runs, and the
//! train-regime by inference-config study.

pub mod adam;
pub mod study;
pub mod task;
pub mod trainer;

pub use adam::{clip_global_norm, Adam, AdamConfig, ClipInfo};
pub use study::{run_mask_study, InferConfig, StudyConfig, StudyRow, StudyTable, TrendCheck};
pub use task::{Batch, SyntheticTask, TaskConfig};
pub use trainer::{
    batch_gradients, batch_loss, loss_program, train_step, MaskDraw, MaskRegime, StepLog, StepStats,
    TrainConfig, TrainLog, Trainer,
};

//! Metrics, equivalence sweeps, cache ablations and latency measurement.

pub mod ablation;
pub mod bench;
pub mod msd;
pub mod sweep;

pub use ablation::{ablation_check, jump_stats, AblationReport, AblationSeed, JumpStats};
pub use bench::{audio_duration, bench, BenchConfig, BenchResult, Percentiles};
pub use msd::{msd, msd_with, MsdKind};
pub use sweep::{
    default_tolerance, equivalence_cell, equivalence_sweep, CellResult, FramesRule, PastRule, SweepCell,
    SweepGrid, SweepReport,
};

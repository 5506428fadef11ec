//! Chunk-based incremental transformer decoding.
//!
//! A stack of FFT blocks (attention plus a causal-convolution feed-forward)
//! turns a feature sequence into mel frames one fixed-size chunk at a time.
//! Each layer carries a bounded key/value cache and `kernel - 1` frames of
//! convolution state between chunks, so per-chunk cost stays constant and the
//! concatenated output matches a full-sequence forward under the matching
//! chunk attention mask.
//!
//! The crate also holds the pieces needed to train and evaluate such a
//! decoder at desk scale: a tape-based autodiff engine, static and dynamic
//! chunk masks, a synthetic sequence task with an Adam trainer, and metric,
//! sweep, ablation and latency harnesses.

pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod format;
pub mod mask;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use decoder::{
    decode_incremental, decode_parallel_masked, DecoderConfig, DecoderState, DecoderWeights,
    IncrementalDecoder,
};
pub use error::{Error, Result};
pub use format::{DynTensor, DynWeights};
pub use mask::{build_static_mask, ChunkMask, DynamicMaskPolicy, PastSize};
pub use tensor::{DType, Scalar, Tensor};

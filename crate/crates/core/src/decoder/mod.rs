//! The chunk-based FFT decoder: configuration, weights, cached state, the
//! incremental and full-sequence forwards, and receptive-field analysis.

mod config;
mod incremental;
mod parallel;
mod positional;
mod receptive;
mod state;
mod weights;

pub use config::DecoderConfig;
pub use incremental::{
    concat_chunks, decode_incremental, decode_incremental_with, ffn_chunk_step, fft_block_step,
    mha_chunk_step, split_chunks, Ablation, IncrementalDecoder,
};
pub use parallel::{
    decode_parallel, decode_parallel_masked, decode_parallel_with_taps, decoder_program, fft_block_program,
};
pub use positional::positional_encoding;
pub use receptive::{
    receptive_field_formula, receptive_field_oracle, LayerReach, ReceptiveFieldReport,
};
pub use state::{AttentionState, ConvState, DecoderState, LayerState};
pub use weights::{param_shapes, DecoderParams, DecoderWeights, LayerParams};

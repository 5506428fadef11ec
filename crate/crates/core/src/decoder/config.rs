use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::PastSize;
use crate::tensor::DType;

/// Shape and streaming parameters of the chunked decoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Hidden width of the convolutional feed-forward sublayer.
    pub d_ff: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    /// Frames per incremental step.
    pub chunk_size: usize,
    /// Frames of key/value history retained between steps.
    pub past_size: PastSize,
    pub mel_bins: usize,
    pub ln_eps: f64,
    pub dtype: DType,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 128,
            kernel1: 3,
            kernel2: 3,
            chunk_size: 8,
            past_size: PastSize::Frames(8),
            mel_bins: 80,
            ln_eps: 1e-5,
            dtype: DType::F64,
        }
    }
}

impl DecoderConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Rows kept in the first conv state (`kernel1 - 1`).
    pub fn conv1_state(&self) -> usize {
        self.kernel1 - 1
    }

    pub fn conv2_state(&self) -> usize {
        self.kernel2 - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.mel_bins == 0 {
            return fail("d_ff and mel_bins must be positive".into());
        }
        if self.kernel1 == 0 || self.kernel2 == 0 {
            return fail("conv kernels must be at least 1".into());
        }
        if self.chunk_size == 0 {
            return fail("chunk_size must be at least 1".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }
}

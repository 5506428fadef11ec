use super::DecoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Past keys and values of one attention layer, one `[t_past × d_head]`
/// tensor per head. Starts empty and grows to the configured past size.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState<S> {
    pub pk: Vec<Tensor<S>>,
    pub pv: Vec<Tensor<S>>,
}

impl<S: Scalar> AttentionState<S> {
    pub fn empty(cfg: &DecoderConfig) -> Self {
        let e = Tensor::zeros(&[0, cfg.d_head()]);
        Self {
            pk: vec![e.clone(); cfg.n_heads],
            pv: vec![e; cfg.n_heads],
        }
    }

    pub fn past_frames(&self) -> usize {
        self.pk.first().map_or(0, |t| t.frames())
    }
}

/// Last `kernel - 1` input frames of each causal conv. Zero at sequence start.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvState<S> {
    pub pc1: Tensor<S>,
    pub pc2: Tensor<S>,
}

impl<S: Scalar> ConvState<S> {
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        Self {
            pc1: Tensor::zeros(&[cfg.conv1_state(), cfg.d_model]),
            pc2: Tensor::zeros(&[cfg.conv2_state(), cfg.d_ff]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<S> {
    pub attn: AttentionState<S>,
    pub conv: ConvState<S>,
}

/// Everything an incremental decoder carries between chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<S> {
    pub layers: Vec<LayerState<S>>,
    /// Absolute index of the next input frame.
    pub frame_offset: usize,
}

impl<S: Scalar> DecoderState<S> {
    pub fn new(cfg: &DecoderConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers)
                .map(|_| LayerState {
                    attn: AttentionState::empty(cfg),
                    conv: ConvState::zeros(cfg),
                })
                .collect(),
            frame_offset: 0,
        }
    }

    /// Checks every cache against the configuration's size limits.
    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("decoder state: {m}")));
        if self.layers.len() != cfg.n_layers {
            return bad(format!("{} layers, expected {}", self.layers.len(), cfg.n_layers));
        }
        let dh = cfg.d_head();
        let limit = cfg.past_size.limit();
        for (i, l) in self.layers.iter().enumerate() {
            if l.attn.pk.len() != cfg.n_heads || l.attn.pv.len() != cfg.n_heads {
                return bad(format!("layer {i}: wrong head count"));
            }
            let t = l.attn.past_frames();
            for (k, v) in l.attn.pk.iter().zip(&l.attn.pv) {
                if k.shape() != [t, dh] || v.shape() != [t, dh] {
                    return bad(format!(
                        "layer {i}: key/value shapes {:?} / {:?}",
                        k.shape(),
                        v.shape()
                    ));
                }
            }
            if t > limit || t > self.frame_offset {
                return bad(format!("layer {i}: {t} past frames exceeds limit"));
            }
            if l.conv.pc1.shape() != [cfg.conv1_state(), cfg.d_model]
                || l.conv.pc2.shape() != [cfg.conv2_state(), cfg.d_ff]
            {
                return bad(format!("layer {i}: conv state shapes"));
            }
        }
        Ok(())
    }

    /// Number of cached scalars; constant once the attention caches are full.
    pub fn cached_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.attn.pk.iter().chain(&l.attn.pv).map(|t| t.len()).sum::<usize>()
                    + l.conv.pc1.len()
                    + l.conv.pc2.len()
            })
            .sum()
    }
}

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DecoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters of one chunk-based FFT block.
///
/// The attention projections are stored fused: head `i` owns column block
/// `i·d_head .. (i+1)·d_head` of `wq`, `wk` and `wv`, and row block `i` of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<V> {
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub wo: V,
    /// `[kernel1, d_model, d_ff]`
    pub conv1_w: V,
    pub conv1_b: V,
    /// `[kernel2, d_ff, d_model]`
    pub conv2_w: V,
    pub conv2_b: V,
    pub ln1_gamma: V,
    pub ln1_beta: V,
    pub ln2_gamma: V,
    pub ln2_beta: V,
}

const LAYER_FIELDS: [&str; 12] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "conv1.w",
    "conv1.b",
    "conv2.w",
    "conv2.b",
    "ln1.gamma",
    "ln1.beta",
    "ln2.gamma",
    "ln2.beta",
];

impl<V> LayerParams<V> {
    fn fields(&self) -> [&V; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn from_fields(mut f: impl FnMut(&'static str) -> Result<V>) -> Result<Self> {
        Ok(Self {
            wq: f(LAYER_FIELDS[0])?,
            wk: f(LAYER_FIELDS[1])?,
            wv: f(LAYER_FIELDS[2])?,
            wo: f(LAYER_FIELDS[3])?,
            conv1_w: f(LAYER_FIELDS[4])?,
            conv1_b: f(LAYER_FIELDS[5])?,
            conv2_w: f(LAYER_FIELDS[6])?,
            conv2_b: f(LAYER_FIELDS[7])?,
            ln1_gamma: f(LAYER_FIELDS[8])?,
            ln1_beta: f(LAYER_FIELDS[9])?,
            ln2_gamma: f(LAYER_FIELDS[10])?,
            ln2_beta: f(LAYER_FIELDS[11])?,
        })
    }
}

/// Full decoder parameter set, generic over the handle type so the same
/// layout serves plain tensors and tape variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<V> {
    pub layers: Vec<LayerParams<V>>,
    /// `[d_model, mel_bins]`
    pub proj_w: V,
    pub proj_b: V,
}

pub type DecoderWeights<S> = DecoderParams<Tensor<S>>;

impl<V> DecoderParams<V> {
    /// Parameters with their canonical names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut out = Vec::with_capacity(self.layers.len() * 12 + 2);
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, v) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{field}"), v));
            }
        }
        out.push(("proj.w".to_string(), &self.proj_w));
        out.push(("proj.b".to_string(), &self.proj_b));
        out
    }

    /// Rebuilds the structure by visiting every canonical name in order.
    pub fn build(n_layers: usize, mut f: impl FnMut(&str) -> Result<V>) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| LayerParams::from_fields(|field| f(&format!("layers.{i}.{field}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            proj_w: f("proj.w")?,
            proj_b: f("proj.b")?,
        })
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &V) -> Result<U>) -> Result<DecoderParams<U>> {
        let named = self.named();
        let mut it = named.into_iter();
        DecoderParams::build(self.layers.len(), |name| {
            let (n, v) = it.next().expect("same layout");
            debug_assert_eq!(n, name);
            f(name, v)
        })
    }
}

/// Expected shape of every named parameter.
pub fn param_shapes(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let shapes = DecoderParams::build(cfg.n_layers, |name| {
        let field = name.rsplit_once("layers.").map_or(name, |(_, rest)| {
            rest.split_once('.').map_or(rest, |(_, f)| f)
        });
        Ok(match field {
            "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
            "conv1.w" => vec![cfg.kernel1, d, cfg.d_ff],
            "conv1.b" => vec![cfg.d_ff],
            "conv2.w" => vec![cfg.kernel2, cfg.d_ff, d],
            "conv2.b" | "ln1.gamma" | "ln1.beta" | "ln2.gamma" | "ln2.beta" => vec![d],
            "proj.w" => vec![d, cfg.mel_bins],
            "proj.b" => vec![cfg.mel_bins],
            other => unreachable!("unknown parameter {other}"),
        })
    })
    .expect("infallible");
    shapes
        .named()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect()
}

impl<S: Scalar> DecoderWeights<S> {
    /// Seeded init: matrices uniform in ±√(6/(fan_in+fan_out)), biases and
    /// betas zero, gammas one. Values are drawn in f64, so f32 and f64 models
    /// with the same seed agree up to rounding.
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        let shapes: BTreeMap<String, Vec<usize>> = param_shapes(cfg).into_iter().collect();
        let (d, dh) = (cfg.d_model, cfg.d_head());
        DecoderParams::build(cfg.n_layers, |name| {
            let shape = &shapes[name];
            Ok(if name.ends_with("attn.wo") {
                uniform(shape, d, d)
            } else if name.contains(".attn.") {
                uniform(shape, d, dh)
            } else if name.ends_with("conv1.w") {
                uniform(shape, cfg.kernel1 * d, cfg.kernel1 * cfg.d_ff)
            } else if name.ends_with("conv2.w") {
                uniform(shape, cfg.kernel2 * cfg.d_ff, cfg.kernel2 * d)
            } else if name == "proj.w" {
                uniform(shape, d, cfg.mel_bins)
            } else if name.ends_with("gamma") {
                Tensor::full(shape, S::one())
            } else {
                Tensor::zeros(shape)
            })
        })
    }

    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "weights have {} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for ((name, t), (_, shape)) in self.named().into_iter().zip(param_shapes(cfg)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_param_set(&self) -> BTreeMap<String, Tensor<S>> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_param_set(cfg: &DecoderConfig, mut map: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let w = DecoderParams::build(cfg.n_layers, |name| {
            map.remove(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        })?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        w.validate(cfg)?;
        Ok(w)
    }

    pub fn cast<T: Scalar>(&self) -> DecoderWeights<T> {
        self.try_map(|_, t| Ok(t.cast())).expect("infallible")
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = DecoderConfig::default();
        let a = DecoderWeights::<f64>::init(&cfg, 7).unwrap();
        let b = DecoderWeights::<f64>::init(&cfg, 7).unwrap();
        let c = DecoderWeights::<f64>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate(&cfg).unwrap();
        let bound = (6.0f64 / (32.0 + 80.0)).sqrt();
        assert!(a.proj_w.data().iter().all(|v| v.abs() < bound));
        assert!(a.layers[0].ln1_gamma.data().iter().all(|&v| v == 1.0));
        let f: DecoderWeights<f32> = DecoderWeights::init(&cfg, 7).unwrap();
        assert_eq!(f, a.cast());
    }

    #[test]
    fn param_set_round_trip() {
        let cfg = DecoderConfig {
            n_layers: 3,
            ..DecoderConfig::default()
        };
        let w = DecoderWeights::<f64>::init(&cfg, 1).unwrap();
        let set = w.to_param_set();
        assert_eq!(set.len(), 3 * 12 + 2);
        assert_eq!(DecoderWeights::from_param_set(&cfg, set.clone()).unwrap(), w);
        let mut missing = set.clone();
        missing.remove("layers.1.conv2.b");
        assert!(DecoderWeights::from_param_set(&cfg, missing).is_err());
    }
}

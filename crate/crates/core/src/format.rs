//! Binary file formats.
//!
//! * `CTN1` tensor: `"CTN1"`, u32 ndim, ndim × u64 dims, u8 dtype (0 = f32,
//!   1 = f64), then the row-major payload. All integers and floats little-endian.
//! * `CFPW` weights: `"CFPW"`, u32 config length, config JSON, u32 tensor
//!   count, then per tensor a u32 name length, UTF-8 name, and a CTN1 tensor.
//! * `CFPS` decoder state: `"CFPS"`, u64 frame offset, then for each layer in
//!   order the CTN1 tensors pk per head, pv per head, pc1, pc2.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::decoder::{AttentionState, ConvState, DecoderConfig, DecoderState, DecoderWeights, LayerState};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CTN1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"CFPW";
pub const STATE_MAGIC: &[u8; 4] = b"CFPS";

/// A tensor whose element type is known only at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.clone(),
        }
    }

    /// Converts to `S`, casting if the stored type differs.
    pub fn into_scalar<S: Scalar>(self) -> Tensor<S> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for DynTensor {
    fn from(t: Tensor<f32>) -> Self {
        DynTensor::F32(t)
    }
}

impl From<Tensor<f64>> for DynTensor {
    fn from(t: Tensor<f64>) -> Self {
        DynTensor::F64(t)
    }
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated input ({e})")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().expect("8 bytes")))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let got = read_exact(r, 4)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    Ok(())
}

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * t.shape().len() + t.len() * S::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(S::DTYPE.code());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<DynTensor> {
    expect_magic(r, TENSOR_MAGIC)?;
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(
            usize::try_from(read_u64(r)?).map_err(|_| Error::Format("dimension overflow".into()))?,
        );
    }
    let code = read_exact(r, 1)?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let bytes = read_exact(r, n * dtype.size())?;
    Ok(match dtype {
        DType::F32 => DynTensor::F32(Tensor::new(
            shape,
            bytes.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => DynTensor::F64(Tensor::new(
            shape,
            bytes.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    })
}

/// Reads a tensor and requires element type `S`.
pub fn read_tensor_as<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let t = read_tensor(r)?;
    if t.dtype() != S::DTYPE {
        return Err(Error::Format(format!(
            "expected {} tensor, found {}",
            S::DTYPE,
            t.dtype()
        )));
    }
    Ok(t.into_scalar())
}

pub fn save_tensor<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DynTensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}

/// Model weights of either precision, tagged by the config's dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum DynWeights {
    F32(DecoderWeights<f32>),
    F64(DecoderWeights<f64>),
}

impl DynWeights {
    pub fn to_f64(&self) -> DecoderWeights<f64> {
        match self {
            DynWeights::F32(w) => w.cast(),
            DynWeights::F64(w) => w.clone(),
        }
    }
}

pub fn encode_weights<S: Scalar>(cfg: &DecoderConfig, w: &DecoderWeights<S>) -> Result<Vec<u8>> {
    if cfg.dtype != S::DTYPE {
        return Err(Error::Config(format!(
            "config says {}, weights are {}",
            cfg.dtype,
            S::DTYPE
        )));
    }
    w.validate(cfg)?;
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let named = w.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t));
    }
    Ok(out)
}

pub fn decode_weights<R: Read>(r: &mut R) -> Result<(DecoderConfig, DynWeights)> {
    expect_magic(r, WEIGHTS_MAGIC)?;
    let len = read_u32(r)? as usize;
    let cfg: DecoderConfig = serde_json::from_slice(&read_exact(r, len)?)?;
    cfg.validate()?;
    let count = read_u32(r)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        let name = String::from_utf8(read_exact(r, n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = read_tensor(r)?;
        if t.dtype() != cfg.dtype {
            return Err(Error::Format(format!(
                "{name}: {} tensor in a {} model",
                t.dtype(),
                cfg.dtype
            )));
        }
        map.insert(name, t);
    }
    let weights = match cfg.dtype {
        DType::F32 => DynWeights::F32(DecoderWeights::from_param_set(
            &cfg,
            map.into_iter().map(|(k, v)| (k, v.into_scalar())).collect(),
        )?),
        DType::F64 => DynWeights::F64(DecoderWeights::from_param_set(
            &cfg,
            map.into_iter().map(|(k, v)| (k, v.into_scalar())).collect(),
        )?),
    };
    Ok((cfg, weights))
}

pub fn save_weights<S: Scalar>(path: impl AsRef<Path>, cfg: &DecoderConfig, w: &DecoderWeights<S>) -> Result<()> {
    std::fs::write(path, encode_weights(cfg, w)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(DecoderConfig, DynWeights)> {
    let bytes = std::fs::read(path)?;
    decode_weights(&mut bytes.as_slice())
}

pub fn encode_state<S: Scalar>(st: &DecoderState<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&(st.frame_offset as u64).to_le_bytes());
    for layer in &st.layers {
        for t in layer.attn.pk.iter().chain(&layer.attn.pv) {
            out.extend_from_slice(&encode_tensor(t));
        }
        out.extend_from_slice(&encode_tensor(&layer.conv.pc1));
        out.extend_from_slice(&encode_tensor(&layer.conv.pc2));
    }
    out
}

/// Reads a state snapshot; the layout (layers, heads) comes from `cfg`.
pub fn decode_state<S: Scalar, R: Read>(r: &mut R, cfg: &DecoderConfig) -> Result<DecoderState<S>> {
    expect_magic(r, STATE_MAGIC)?;
    let frame_offset = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("offset overflow".into()))?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let pk = (0..cfg.n_heads).map(|_| read_tensor_as(r)).collect::<Result<Vec<_>>>()?;
        let pv = (0..cfg.n_heads).map(|_| read_tensor_as(r)).collect::<Result<Vec<_>>>()?;
        let pc1 = read_tensor_as(r)?;
        let pc2 = read_tensor_as(r)?;
        layers.push(LayerState {
            attn: AttentionState { pk, pv },
            conv: ConvState { pc1, pc2 },
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after decoder state".into()));
    }
    let st = DecoderState { layers, frame_offset };
    st.validate(cfg)?;
    Ok(st)
}

pub fn save_state<S: Scalar>(path: impl AsRef<Path>, st: &DecoderState<S>) -> Result<()> {
    std::fs::write(path, encode_state(st))?;
    Ok(())
}

pub fn load_state<S: Scalar>(path: impl AsRef<Path>, cfg: &DecoderConfig) -> Result<DecoderState<S>> {
    let bytes = std::fs::read(path)?;
    decode_state(&mut bytes.as_slice(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"CTN1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(b[24], 0);
        assert_eq!(&b[25..29], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 33);
    }

    #[test]
    fn rejects_corrupt_tensors() {
        let t = Tensor::<f64>::zeros(&[3, 2]);
        let mut b = encode_tensor(&t);
        assert!(read_tensor(&mut &b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(read_tensor(&mut b.as_slice()).is_err());
        let mut b = encode_tensor(&t);
        b[4 + 4 + 16] = 9;
        assert!(read_tensor(&mut b.as_slice()).is_err());
    }

    #[test]
    fn empty_tensor_round_trips() {
        let t = Tensor::<f64>::zeros(&[0, 4]);
        let back = read_tensor(&mut encode_tensor(&t).as_slice()).unwrap();
        assert_eq!(back, DynTensor::F64(t));
    }

    #[test]
    fn weights_round_trip_both_dtypes() {
        let cfg = DecoderConfig {
            d_model: 8,
            d_ff: 12,
            mel_bins: 5,
            ..DecoderConfig::default()
        };
        let w = DecoderWeights::<f64>::init(&cfg, 3).unwrap();
        let bytes = encode_weights(&cfg, &w).unwrap();
        assert_eq!(&bytes[..4], b"CFPW");
        let (c2, w2) = decode_weights(&mut bytes.as_slice()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(w2, DynWeights::F64(w.clone()));

        let cfg32 = DecoderConfig {
            dtype: DType::F32,
            ..cfg.clone()
        };
        let w32: DecoderWeights<f32> = w.cast();
        assert!(encode_weights(&cfg, &w32).is_err());
        let bytes = encode_weights(&cfg32, &w32).unwrap();
        let (_, back) = decode_weights(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, DynWeights::F32(w32));
    }

    #[test]
    fn state_round_trip_and_validation() {
        let cfg = DecoderConfig {
            d_model: 8,
            d_ff: 12,
            ..DecoderConfig::default()
        };
        let mut st = DecoderState::<f64>::new(&cfg);
        let bytes = encode_state(&st);
        assert_eq!(decode_state::<f64, _>(&mut bytes.as_slice(), &cfg).unwrap(), st);
        // a cache longer than frames consumed is rejected
        st.layers[0].attn.pk[0] = Tensor::zeros(&[2, cfg.d_head()]);
        st.layers[0].attn.pv[0] = Tensor::zeros(&[2, cfg.d_head()]);
        let bytes = encode_state(&st);
        assert!(decode_state::<f64, _>(&mut bytes.as_slice(), &cfg).is_err());
        assert!(decode_state::<f32, _>(&mut encode_state(&DecoderState::<f64>::new(&cfg)).as_slice(), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>(), wide in any::<bool>()) {
            let vals: Vec<f64> = (0..rows * cols).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
            let t = Tensor::new(vec![rows, cols], vals).unwrap();
            if wide {
                let back = read_tensor(&mut encode_tensor(&t).as_slice()).unwrap();
                prop_assert_eq!(back, DynTensor::F64(t));
            } else {
                let t: Tensor<f32> = t.cast();
                let back = read_tensor(&mut encode_tensor(&t).as_slice()).unwrap();
                prop_assert_eq!(back, DynTensor::F32(t));
            }
        }
    }
}

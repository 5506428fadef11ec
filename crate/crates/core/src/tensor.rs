//! Dense row-major tensors and the small set of kernels the decoder needs.
//!
//! Axis 0 is always the time axis. Every reduction runs in a fixed order
//! (ascending index), so a given input produces bit-identical output on every
//! run and in both the chunked and the one-shot decoder paths.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ChunkMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<S>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a rank-2 tensor from a generator over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { S::one() } else { S::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        S::DTYPE
    }

    /// Length of the time axis (axis 0).
    pub fn frames(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per time step.
    pub fn frame_stride(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            )),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let stride = self.frame_stride();
        &self.data[r * stride..(r + 1) * stride]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference, computed in f64. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`. Each output element accumulates over `k` in ascending order.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a[m×k] · b[n×k]ᵀ`. Each element sums over `k` in ascending order, the
/// same as [`matmul`] against an explicit transpose.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, k) = a.dims2()?;
    let (_, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape, b.shape),
        ));
    }
    matmul(a, &transpose(b)?)
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = a.dims2()?;
    let mut data = Vec::with_capacity(m * n);
    for c in 0..n {
        for r in 0..m {
            data.push(a.data[r * n + c]);
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data,
    })
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("sub", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect(),
    })
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

pub fn scale<S: Scalar>(a: &Tensor<S>, s: S) -> Tensor<S> {
    a.map(|v| v * s)
}

pub fn relu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    a.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Adds a `[d]` bias to every row of `x[T×d]`.
pub fn add_row<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, d) = x.dims2()?;
    if bias.shape != [d] {
        return Err(Error::shape(
            "add_row",
            format!("{:?} + {:?}", x.shape, bias.shape),
        ));
    }
    let mut out = x.data.clone();
    for r in 0..t {
        for (o, &b) in out[r * d..(r + 1) * d].iter_mut().zip(&bias.data) {
            *o = *o + b;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Row-wise softmax over the last axis. When a mask is given, the trailing
/// two axes are `(query, key)` and must fit inside the mask; a forbidden
/// entry gets exactly zero weight.
pub fn masked_softmax<S: Scalar>(logits: &Tensor<S>, mask: Option<&ChunkMask>) -> Result<Tensor<S>> {
    let rank = logits.shape.len();
    if rank == 0 {
        return Err(Error::shape("masked_softmax", "rank 0"));
    }
    let tk = logits.shape[rank - 1];
    let tq = if rank >= 2 { logits.shape[rank - 2] } else { 1 };
    if let Some(m) = mask {
        if rank < 2 || tq > m.total_frames() || tk > m.total_frames() {
            return Err(Error::shape(
                "masked_softmax",
                format!(
                    "logits {:?} not covered by {}x{} mask",
                    logits.shape,
                    m.total_frames(),
                    m.total_frames()
                ),
            ));
        }
    }
    let mut out = vec![S::zero(); logits.data.len()];
    if tk == 0 {
        return Ok(Tensor {
            shape: logits.shape.clone(),
            data: out,
        });
    }
    for (r, (row, orow)) in logits
        .data
        .chunks(tk)
        .zip(out.chunks_mut(tk))
        .enumerate()
    {
        let q = r % tq;
        let allowed = |k: usize| mask.is_none_or(|m| m.allows(q, k));
        let mut max = S::neg_infinity();
        for (k, &v) in row.iter().enumerate() {
            if allowed(k) && v > max {
                max = v;
            }
        }
        if max == S::neg_infinity() {
            if (0..tk).any(allowed) {
                // every permitted logit is -inf: degenerate input, not a mask bug
                return Err(Error::shape(
                    "masked_softmax",
                    format!("row {} has only -inf logits", r),
                ));
            }
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = S::zero();
        for (k, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            let e = if allowed(k) { (v - max).exp() } else { S::zero() };
            *o = e;
            sum = sum + e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

/// Per-frame normalization over the feature axis (biased variance, two passes).
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Layer norm returning `(y, x_hat, 1/σ per frame)` for reuse in backward.
pub(crate) fn layer_norm_parts<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, Tensor<S>, Vec<S>)> {
    let (t, d) = x.dims2()?;
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x {:?}, gamma {:?}, beta {:?}",
                x.shape, gamma.shape, beta.shape
            ),
        ));
    }
    let n = S::from_f64(d as f64);
    let mut y = Vec::with_capacity(t * d);
    let mut xhat = Vec::with_capacity(t * d);
    let mut rstd = Vec::with_capacity(t);
    for row in x.data.chunks(d.max(1)).take(t) {
        let mean = row.iter().fold(S::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(S::zero(), |a, &v| {
            let c = v - mean;
            a + c * c
        }) / n;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((&v, &g), &b) in row.iter().zip(&gamma.data).zip(&beta.data) {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(h * g + b);
        }
    }
    Ok((
        Tensor {
            shape: vec![t, d],
            data: y,
        },
        Tensor {
            shape: vec![t, d],
            data: xhat,
        },
        rstd,
    ))
}

/// Valid (unpadded) 1-D convolution over time. `x` carries its own
/// `k - 1` frames of left context, so output frame `t` reads input frames
/// `t..t+k`. Each output element starts from the bias and accumulates over
/// kernel tap, then input channel, both ascending.
pub fn causal_conv1d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (tx, din) = x.dims2()?;
    let (k, wi, dout) = match w.shape[..] {
        [k, i, o] => (k, i, o),
        _ => {
            return Err(Error::shape(
                "causal_conv1d",
                format!("weight must be rank 3, got {:?}", w.shape),
            ))
        }
    };
    if wi != din || b.shape != [dout] || k == 0 {
        return Err(Error::shape(
            "causal_conv1d",
            format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    if tx < k {
        return Err(Error::shape(
            "causal_conv1d",
            format!("input has {} frames, kernel needs at least {}", tx, k),
        ));
    }
    let t_out = tx + 1 - k;
    let mut out = Vec::with_capacity(t_out * dout);
    for t in 0..t_out {
        let start = out.len();
        out.extend_from_slice(&b.data);
        let orow = &mut out[start..];
        for j in 0..k {
            let xrow = &x.data[(t + j) * din..(t + j + 1) * din];
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &w.data[(j * din + i) * dout..(j * din + i + 1) * dout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + wv * xv;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![t_out, dout],
        data: out,
    })
}

/// Concatenates along axis 0. Trailing axes must agree; either side may be empty.
pub fn concat_time<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape.len() != b.shape.len() || a.shape.is_empty() || a.shape[1..] != b.shape[1..] {
        return Err(Error::shape(
            "concat_time",
            format!("{:?} ++ {:?}", a.shape, b.shape),
        ));
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor { shape, data })
}

/// The last `s` frames of `x`, or all of `x` when it has fewer than `s`.
pub fn tail_slice<S: Scalar>(x: &Tensor<S>, s: usize) -> Tensor<S> {
    let t = x.frames();
    let keep = s.min(t);
    slice_time(x, t - keep, keep).expect("in range by construction")
}

pub fn slice_time<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    if x.shape.is_empty() || start + len > x.frames() {
        return Err(Error::shape(
            "slice_time",
            format!("[{}..{}] of {:?}", start, start + len, x.shape),
        ));
    }
    let stride = x.frame_stride();
    let mut shape = x.shape.clone();
    shape[0] = len;
    Ok(Tensor {
        shape,
        data: x.data[start * stride..(start + len) * stride].to_vec(),
    })
}

/// Columns `start..start+len` of a rank-2 tensor.
pub fn slice_cols<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    let (t, d) = x.dims2()?;
    if start + len > d {
        return Err(Error::shape(
            "slice_cols",
            format!("[{}..{}] of {:?}", start, start + len, x.shape),
        ));
    }
    let mut data = Vec::with_capacity(t * len);
    for r in 0..t {
        data.extend_from_slice(&x.data[r * d + start..r * d + start + len]);
    }
    Ok(Tensor {
        shape: vec![t, len],
        data,
    })
}

/// Side-by-side concatenation of rank-2 tensors with equal row counts.
pub fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("concat_cols", "no inputs"));
    };
    let t = first.dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != t {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {} vs {}", t, r),
            ));
        }
        widths.push(c);
    }
    let d: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(t * d);
    for r in 0..t {
        for (p, &c) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
        }
    }
    Ok(Tensor {
        shape: vec![t, d],
        data,
    })
}

/// Mean of squared differences over every element.
pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    same_shape("mse", pred, target)?;
    if pred.data.is_empty() {
        return Err(Error::shape("mse", "empty operands"));
    }
    let sum = pred
        .data
        .iter()
        .zip(&target.data)
        .fold(S::zero(), |acc, (&p, &t)| {
            let d = p - t;
            acc + d * d
        });
    Ok(sum / S::from_f64(pred.data.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = matmul(&t2(&[&[1.0, 2.0]]), &t2(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = random(5, 7, 1);
        let b = random(7, 3, 2);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert_eq!(got.at(i, j).to_bits(), acc.to_bits());
            }
        }
        let nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        assert_eq!(nt, got);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&random(2, 3, 0), &random(2, 3, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = masked_softmax(&Tensor::<f64>::zeros(&[1, 3]), None).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mask = ChunkMask::from_permitted(2, vec![true, false, true, true]).unwrap();
        let p = masked_softmax(&t2(&[&[5.0, 5.0], &[5.0, 5.0]]), Some(&mask)).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mask = ChunkMask::from_permitted(2, vec![false, false, true, true]).unwrap();
        let err = masked_softmax(&Tensor::<f64>::zeros(&[2, 2]), Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let x = t2(&[&[3.0, 3.0, 3.0], &[-1.0, 2.0, 5.0]]);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!(y.row(0).iter().all(|&v| v == 0.0));
        let b = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let y = layer_norm(&x, &zeros, &b, 1e-5).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle_f32() {
        let x64 = random(4, 9, 3).map(|v| v * 3.0 + 1.0);
        let x: Tensor<f32> = x64.cast();
        let g: Tensor<f32> = random(1, 9, 4).reshape(vec![9]).unwrap().cast();
        let b: Tensor<f32> = random(1, 9, 5).reshape(vec![9]).unwrap().cast();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            for c in 0..9 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt() * g.data()[c] as f64
                    + b.data()[c] as f64;
                assert!((y.at(r, c) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_degenerate_kernels() {
        // k = 1 is a pointwise linear map
        let x = random(4, 3, 6);
        let w = random(3, 2, 7);
        let b = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        let y = causal_conv1d(&x, &w.clone().reshape(vec![1, 3, 2]).unwrap(), &b).unwrap();
        // bias enters first here, last in matmul + add_row
        assert!(y.max_abs_diff(&add_row(&matmul(&x, &w).unwrap(), &b).unwrap()).unwrap() < 1e-15);

        // k = 2 with only the earlier tap set to identity: output is a one-frame shift
        let x = t2(&[&[1.0, 10.0], &[2.0, 20.0], &[3.0, 30.0]]);
        let mut wd = vec![0.0; 8];
        wd[0] = 1.0;
        wd[3] = 1.0;
        let w = Tensor::new(vec![2, 2, 2], wd).unwrap();
        let y = causal_conv1d(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, t2(&[&[1.0, 10.0], &[2.0, 20.0]]));
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let (k, din, dout, t) = (3, 4, 5, 6);
        let x = random(t + k - 1, din, 8);
        let w = random(k * din, dout, 9).reshape(vec![k, din, dout]).unwrap();
        let b = random(1, dout, 10).reshape(vec![dout]).unwrap();
        let y = causal_conv1d(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[t, dout]);
        for ti in 0..t {
            for o in 0..dout {
                let mut acc = b.data()[o];
                for j in 0..k {
                    for i in 0..din {
                        acc += w.data()[(j * din + i) * dout + o] * x.at(ti + j, i);
                    }
                }
                assert_eq!(y.at(ti, o).to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn conv_rejects_short_input() {
        let err = causal_conv1d(
            &Tensor::<f64>::zeros(&[2, 1]),
            &Tensor::zeros(&[3, 1, 1]),
            &Tensor::zeros(&[1]),
        );
        assert!(err.is_err());
    }

    #[test]
    fn tail_and_concat() {
        let x = Tensor::<f64>::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(tail_slice(&x, 2).data(), &[4.0, 5.0]);
        assert_eq!(tail_slice(&x, 0).shape(), &[0, 1]);
        assert_eq!(tail_slice(&x, 99), x);
        let empty = Tensor::<f64>::zeros(&[0, 1]);
        assert_eq!(concat_time(&empty, &x).unwrap(), x);
        assert!(concat_time(&x, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn cols_round_trip() {
        let x = random(3, 6, 11);
        let a = slice_cols(&x, 0, 2).unwrap();
        let b = slice_cols(&x, 2, 4).unwrap();
        assert_eq!(concat_cols(&[&a, &b]).unwrap(), x);
    }

    #[test]
    fn elementwise_ops() {
        let a = t2(&[&[-1.0, 2.0]]);
        let b = t2(&[&[0.5, 0.5]]);
        assert_eq!(relu(&a).data(), &[0.0, 2.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[-0.5, 2.5]);
        assert_eq!(sub(&a, &b).unwrap().data(), &[-1.5, 1.5]);
        assert_eq!(scale(&a, 2.0).data(), &[-2.0, 4.0]);
        assert!((mse(&a, &b).unwrap() - (2.25 + 2.25) / 2.0).abs() < 1e-15);
    }
}

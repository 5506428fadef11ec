//! Mel-spectrogram distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsdKind {
    /// Mean over frames of the per-frame Euclidean distance.
    #[default]
    FrameL2,
    /// Mean over frames and bins of the squared difference.
    MeanSquared,
}

pub fn msd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    msd_with(a, b, MsdKind::FrameL2)
}

pub fn msd_with<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, kind: MsdKind) -> Result<f64> {
    let (t, bins) = a.dims2()?;
    if a.shape() != b.shape() {
        return Err(Error::shape("msd", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if t == 0 {
        return Err(Error::shape("msd", "no frames"));
    }
    let mut total = 0.0;
    for f in 0..t {
        let ss: f64 = a.row(f)
            .iter()
            .zip(b.row(f))
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        total += match kind {
            MsdKind::FrameL2 => ss.sqrt(),
            MsdKind::MeanSquared => ss / bins.max(1) as f64,
        };
    }
    Ok(total / t as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mel(t: usize, vals: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(t, 80, vals)
    }

    #[test]
    fn identical_is_zero() {
        let a = mel(5, |i, j| (i * 80 + j) as f64 * 0.01);
        assert_eq!(msd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let a = mel(1, |_, j| match j {
            0 => 3.0,
            1 => 4.0,
            _ => 0.0,
        });
        let b = mel(1, |_, _| 0.0);
        assert_eq!(msd(&a, &b).unwrap(), 5.0);
        assert_eq!(msd_with(&a, &b, MsdKind::MeanSquared).unwrap(), 25.0 / 80.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(msd(&mel(2, |_, _| 0.0), &mel(3, |_, _| 0.0)).is_err());
    }

    fn brute(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (t, n) = a.dims2().unwrap();
        let mut s = 0.0;
        for i in 0..t {
            let mut f = 0.0;
            for j in 0..n {
                f += (a.at(i, j) - b.at(i, j)).powi(2);
            }
            s += f.sqrt();
        }
        s / t as f64
    }

    proptest! {
        #[test]
        fn metric_properties(t in 1usize..6, seed in any::<u32>()) {
            let g = |k: u32| mel(t, move |i, j| (((i * 80 + j) as f64 + k as f64) * 0.37).sin());
            let (a, b, c) = (g(seed), g(seed.wrapping_add(17)), g(seed.wrapping_mul(3)));
            let ab = msd(&a, &b).unwrap();
            prop_assert!((ab - brute(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(ab, msd(&b, &a).unwrap());
            prop_assert!(msd(&a, &c).unwrap() <= ab + msd(&b, &c).unwrap() + 1e-12);
        }
    }
}

use crate::tensor::{Scalar, Tensor};

/// Sinusoidal encoding for absolute frames `offset .. offset + len`.
///
/// Column `2i` holds `sin(pos / 10000^(2i/d))`, column `2i+1` the matching
/// cosine. Each entry is a function of the absolute position alone, so a
/// chunk encoded at its offset equals the corresponding rows of a one-shot
/// encoding bit for bit.
pub fn positional_encoding<S: Scalar>(offset: usize, len: usize, d_model: usize) -> Tensor<S> {
    Tensor::from_fn(len, d_model, |r, c| {
        let pos = (offset + r) as f64;
        let pair = (c / 2 * 2) as f64;
        let angle = pos / 10000f64.powf(pair / d_model as f64);
        S::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{concat_time, slice_time};

    #[test]
    fn position_zero_alternates() {
        let pe = positional_encoding::<f64>(0, 1, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn offset_matches_rows_of_one_shot() {
        let full = positional_encoding::<f64>(0, 40, 16);
        for k in [0, 1, 17, 39] {
            let one = positional_encoding::<f64>(k, 1, 16);
            assert_eq!(one.row(0), full.row(k));
        }
        let a = positional_encoding::<f32>(0, 13, 8);
        let b = positional_encoding::<f32>(13, 27, 8);
        assert_eq!(concat_time(&a, &b).unwrap(), positional_encoding(0, 40, 8));
        assert_eq!(
            slice_time(&full, 5, 10).unwrap(),
            positional_encoding(5, 10, 16)
        );
    }
}

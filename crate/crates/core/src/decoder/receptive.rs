//! Receptive field of the chunked decoder along attention paths.
//!
//! The closed form counts chunks: `(layers + ⌊past/chunk⌋ + 1) · chunk`.
//! The oracle replays the cache mechanics on dependency sets instead of
//! values: every key slot carries the set of input frames it depends on, the
//! cache keeps the tail of `concat(cache, chunk keys)`, and a chunk's output
//! depends on the union of everything its queries attend. Feed-forward
//! convolutions are left out, as in the usual attention-only picture.

use serde::Serialize;

use crate::error::{Error, Result};

pub fn receptive_field_formula(n_layers: usize, past: usize, chunk: usize) -> Result<usize> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    Ok((n_layers + past / chunk + 1) * chunk)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerReach {
    /// 1-based depth in the stack.
    pub layer: usize,
    /// Input frames from the earliest dependency through the end of the current chunk.
    pub span_frames: usize,
    /// Whole chunks touched, times the chunk size.
    pub chunk_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReceptiveFieldReport {
    pub n_layers: usize,
    pub chunk: usize,
    pub past: usize,
    /// Closed form.
    pub formula: usize,
    /// Traversal result counted in whole chunks (same unit as the formula).
    pub oracle: usize,
    /// Traversal result counted in frames.
    pub oracle_span: usize,
    pub per_layer: Vec<LayerReach>,
}

impl ReceptiveFieldReport {
    pub fn agrees(&self) -> bool {
        self.formula == self.oracle
    }

    pub fn delta(&self) -> i64 {
        self.oracle as i64 - self.formula as i64
    }
}

#[derive(Clone)]
struct FrameSet(Vec<u64>);

impl FrameSet {
    fn empty(n: usize) -> Self {
        FrameSet(vec![0; n.div_ceil(64)])
    }

    fn single(n: usize, f: usize) -> Self {
        let mut s = Self::empty(n);
        s.0[f / 64] |= 1 << (f % 64);
        s
    }

    fn union_with(&mut self, other: &FrameSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }

    fn min(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .find(|(_, w)| **w != 0)
            .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
    }
}

/// Exact reach of the last chunk's output through `n_layers` cached attention layers.
pub fn receptive_field_oracle(n_layers: usize, past: usize, chunk: usize) -> Result<ReceptiveFieldReport> {
    let formula = receptive_field_formula(n_layers, past, chunk)?;
    if n_layers == 0 {
        return Err(Error::Config("need at least one layer".into()));
    }
    // Enough history that no dependency chain can run into frame 0.
    let n_chunks = n_layers * (past.div_ceil(chunk) + 1) + 2;
    let total = n_chunks * chunk;
    let last_chunk_start = (n_chunks - 1) * chunk;

    let mut inputs: Vec<FrameSet> = (0..total).map(|f| FrameSet::single(total, f)).collect();
    let mut per_layer = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let mut outputs = Vec::with_capacity(total);
        let mut cache: Vec<FrameSet> = Vec::new();
        for c in 0..n_chunks {
            let mut keys = std::mem::take(&mut cache);
            keys.extend_from_slice(&inputs[c * chunk..(c + 1) * chunk]);
            let mut out = FrameSet::empty(total);
            for k in &keys {
                out.union_with(k);
            }
            outputs.extend(std::iter::repeat_n(out, chunk));
            let keep = past.min(keys.len());
            cache = keys.split_off(keys.len() - keep);
        }
        let earliest = outputs[last_chunk_start].min().expect("own frame is always present");
        if earliest == 0 {
            return Err(Error::Config("receptive field simulation too short".into()));
        }
        per_layer.push(LayerReach {
            layer,
            span_frames: total - earliest,
            chunk_frames: (n_chunks - earliest / chunk) * chunk,
        });
        inputs = outputs;
    }
    let last = per_layer.last().expect("at least one layer").clone();
    Ok(ReceptiveFieldReport {
        n_layers,
        chunk,
        past,
        formula,
        oracle: last.chunk_frames,
        oracle_span: last.span_frames,
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(receptive_field_formula(6, 15, 30).unwrap(), 210);
        assert_eq!(receptive_field_formula(4, 0, 30).unwrap(), 150);
        assert_eq!(receptive_field_formula(2, 60, 30).unwrap(), 150);
        assert!(receptive_field_formula(2, 1, 0).is_err());
    }

    #[test]
    fn partial_past_reaches_one_chunk_per_layer() {
        for n in 1..=6 {
            for (chunk, past) in [(30, 15), (4, 1), (4, 3), (30, 29)] {
                let r = receptive_field_oracle(n, past, chunk).unwrap();
                assert_eq!(r.oracle, (n + 1) * chunk, "n={n} c={chunk} p={past}");
                assert_eq!(r.oracle_span, n * chunk + past);
                assert!(r.agrees());
            }
        }
    }

    #[test]
    fn zero_past_stays_inside_the_chunk() {
        let r = receptive_field_oracle(3, 0, 4).unwrap();
        assert_eq!(r.oracle, 4);
        assert_eq!(r.oracle_span, 4);
    }

    #[test]
    fn whole_chunk_multiples_compound_per_layer() {
        // past = m·chunk: each layer steps m chunks further back
        for n in 1..=4 {
            for m in 1..=3 {
                let r = receptive_field_oracle(n, m * 5, 5).unwrap();
                assert_eq!(r.oracle, (m * n + 1) * 5, "n={n} m={m}");
                assert_eq!(r.oracle_span, r.oracle);
            }
        }
    }

    #[test]
    fn per_layer_table_is_monotone() {
        let r = receptive_field_oracle(4, 7, 4).unwrap();
        assert_eq!(r.per_layer.len(), 4);
        for w in r.per_layer.windows(2) {
            assert!(w[1].span_frames >= w[0].span_frames);
        }
    }
}

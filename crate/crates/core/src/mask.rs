//! Chunk attention masks for receptive-field-constrained training.
//!
//! A query in chunk `c` may attend every key of its own chunk plus the
//! `past` frames immediately before the chunk start. All queries of a chunk
//! share one row pattern, the same way an incremental step attends one
//! shared key/value cache.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Attention look-back in frames, or unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PastSize {
    Frames(usize),
    All,
}

impl PastSize {
    /// Frame budget usable with `tail_slice`; `All` keeps everything.
    pub fn limit(self) -> usize {
        match self {
            PastSize::Frames(n) => n,
            PastSize::All => usize::MAX,
        }
    }

    pub fn frames(self) -> Option<usize> {
        match self {
            PastSize::Frames(n) => Some(n),
            PastSize::All => None,
        }
    }
}

impl fmt::Display for PastSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PastSize::Frames(n) => write!(f, "{n}"),
            PastSize::All => f.write_str("all"),
        }
    }
}

impl FromStr for PastSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(PastSize::All);
        }
        s.parse::<usize>()
            .map(PastSize::Frames)
            .map_err(|_| Error::Config(format!("past size must be a frame count or \"all\", got {s:?}")))
    }
}

impl Serialize for PastSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PastSize::Frames(n) => s.serialize_u64(*n as u64),
            PastSize::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for PastSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(PastSize::Frames(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ChunkMask {
    total_frames: usize,
    chunk_size: usize,
    past: PastSize,
    permitted: Vec<bool>,
}

impl fmt::Debug for ChunkMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ChunkMask(T={}, chunk={}, past={})",
            self.total_frames, self.chunk_size, self.past
        )
    }
}

/// Builds the fixed-size mask: chunk `c` covers `[c·chunk, min((c+1)·chunk, T))`.
pub fn build_static_mask(total_frames: usize, chunk_size: usize, past: PastSize) -> Result<ChunkMask> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    if total_frames == 0 {
        return Err(Error::Config("mask needs at least one frame".into()));
    }
    let t = total_frames;
    let mut permitted = vec![false; t * t];
    for q in 0..t {
        let start = q / chunk_size * chunk_size;
        let end = (start + chunk_size).min(t);
        let first = match past {
            PastSize::Frames(p) => start.saturating_sub(p),
            PastSize::All => 0,
        };
        permitted[q * t + first..q * t + end].fill(true);
    }
    Ok(ChunkMask {
        total_frames: t,
        chunk_size,
        past,
        permitted,
    })
}

impl ChunkMask {
    /// Wraps an explicit `T×T` permission matrix. Chunk metadata is set to a
    /// single chunk covering everything.
    pub fn from_permitted(total_frames: usize, permitted: Vec<bool>) -> Result<Self> {
        if permitted.len() != total_frames * total_frames {
            return Err(Error::shape(
                "ChunkMask",
                format!("{} entries for T={}", permitted.len(), total_frames),
            ));
        }
        Ok(Self {
            total_frames,
            chunk_size: total_frames.max(1),
            past: PastSize::All,
            permitted,
        })
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn past(&self) -> PastSize {
        self.past
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.permitted[query * self.total_frames + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.permitted[query * self.total_frames..(query + 1) * self.total_frames]
    }

    pub fn count_permitted(&self) -> usize {
        self.permitted.iter().filter(|&&p| p).count()
    }

    /// One line per query, `#` for permitted and `.` for masked.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.total_frames * (self.total_frames + 1));
        for q in 0..self.total_frames {
            s.extend(self.row(q).iter().map(|&p| if p { '#' } else { '.' }));
            s.push('\n');
        }
        s
    }

    /// Binary PGM (P5); permitted cells are black on white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let t = self.total_frames;
        let mut out = format!("P5\n{t} {t}\n255\n").into_bytes();
        out.extend(self.permitted.iter().map(|&p| if p { 0u8 } else { 255u8 }));
        out
    }
}

/// Past-size choice of the dynamic policy, as a multiple of the sampled chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PastMultiplier {
    Times(f64),
    All(AllTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTag {
    All,
}

impl PastMultiplier {
    pub const ALL: PastMultiplier = PastMultiplier::All(AllTag::All);

    /// Fractional pasts round down.
    pub fn resolve(self, chunk_size: usize) -> PastSize {
        match self {
            PastMultiplier::Times(m) => PastSize::Frames((m * chunk_size as f64).floor() as usize),
            PastMultiplier::All(_) => PastSize::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicMaskPolicy {
    /// Inclusive chunk size range.
    pub chunk_range: (usize, usize),
    pub past_multipliers: Vec<PastMultiplier>,
}

impl Default for DynamicMaskPolicy {
    fn default() -> Self {
        Self {
            chunk_range: (1, 50),
            past_multipliers: vec![
                PastMultiplier::Times(0.0),
                PastMultiplier::Times(0.25),
                PastMultiplier::Times(0.5),
                PastMultiplier::Times(1.0),
                PastMultiplier::Times(2.0),
                PastMultiplier::Times(3.0),
                PastMultiplier::ALL,
            ],
        }
    }
}

impl DynamicMaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.chunk_range;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!(
                "dynamic chunk range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.past_multipliers.is_empty() {
            return Err(Error::Config("dynamic policy needs at least one past multiplier".into()));
        }
        for m in &self.past_multipliers {
            if let PastMultiplier::Times(x) = m {
                if !(x.is_finite() && *x >= 0.0) {
                    return Err(Error::Config(format!("bad past multiplier {x}")));
                }
            }
        }
        Ok(())
    }

    /// Draws `(chunk, past)`: chunk uniform over the range, multiplier uniform over the list.
    pub fn sample_sizes<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, PastSize) {
        let (lo, hi) = self.chunk_range;
        let chunk = rng.gen_range(lo..=hi);
        let m = self.past_multipliers[rng.gen_range(0..self.past_multipliers.len())];
        (chunk, m.resolve(chunk))
    }
}

pub fn sample_dynamic_mask<R: Rng + ?Sized>(
    total_frames: usize,
    policy: &DynamicMaskPolicy,
    rng: &mut R,
) -> Result<ChunkMask> {
    policy.validate()?;
    let (chunk, past) = policy.sample_sizes(rng);
    build_static_mask(total_frames, chunk, past)
}

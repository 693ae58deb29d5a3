//! Frame samplers and PK batch composition.
//!
//! All samplers return zero-based frame indices into a sequence of length
//! `L`. The on-screen numbering used in reports (`x_1 .. x_L`) is these plus one.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of frames loaded per sequence at inference time.
pub const INFERENCE_FRAME_CAP: usize = 720;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Equal-interval frames starting at the first frame.
    Uniform,
    /// Contiguous window that loops back to the start when the sequence is short.
    Cyclic,
    /// Contiguous window; short sequences are padded by in-order duplication.
    Noncyclic,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "cyclic" => Ok(Strategy::Cyclic),
            "noncyclic" => Ok(Strategy::Noncyclic),
            _ => Err(Error::Config(format!(
                "unknown sampling strategy {s:?} (uniform | cyclic | noncyclic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Frames per training sample.
    pub frames: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::Noncyclic,
            frames: 30,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("sampler frame count must be at least 1".into()));
        }
        Ok(())
    }

    /// Draws the window start (when needed) from `rng` and samples.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.frames;
        let start = if len > n { rng.gen_range(0..=len - n) } else { 0 };
        match self.strategy {
            Strategy::Uniform => uniform_sample(len, n),
            Strategy::Cyclic => cyclic_sample(len, n, start),
            Strategy::Noncyclic => noncyclic_sample(len, n, start),
        }
    }
}

/// Non-cyclic continuous sampling.
///
/// For `len >= n` this is the window `start .. start + n`. Shorter sequences
/// keep their order and duplicate frames front to back: with `n = q * len + r`,
/// the first `r` frames appear `q + 1` times and the rest `q` times. One pass
/// (`len < n <= 2 len`) gives `[x1, x1, .., x_{n-len}, x_{n-len}, x_{n-len+1}, .., x_len]`.
pub fn noncyclic_sample(len: usize, n: usize, start: usize) -> Vec<usize> {
    assert!(len >= 1, "empty sequence");
    if len >= n {
        assert!(start <= len - n, "window start {start} out of range for {len} frames");
        return (start..start + n).collect();
    }
    let (q, r) = (n / len, n % len);
    (0..len)
        .flat_map(|i| std::iter::repeat(i).take(if i < r { q + 1 } else { q }))
        .collect()
}

/// Cyclic continuous sampling: `(start + i) mod len` for `i in 0..n`.
pub fn cyclic_sample(len: usize, n: usize, start: usize) -> Vec<usize> {
    assert!(len >= 1, "empty sequence");
    (0..n).map(|i| (start + i) % len).collect()
}

/// Equal-interval sampling `floor(i * len / n)`; falls back to the
/// non-cyclic duplication rule when `len < n`.
pub fn uniform_sample(len: usize, n: usize) -> Vec<usize> {
    assert!(len >= 1, "empty sequence");
    if len < n {
        return noncyclic_sample(len, n, 0);
    }
    (0..n).map(|i| i * len / n).collect()
}

/// Frames used at inference: all of them, in order, up to the cap.
pub fn inference_indices(len: usize) -> Vec<usize> {
    (0..len.min(INFERENCE_FRAME_CAP)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    /// Subjects per batch.
    pub p: usize,
    /// Sequences per subject.
    pub k: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { p: 32, k: 4 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "PK batch needs p >= 2 and k >= 2 for triplets, got p={} k={}",
                self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.p * self.k
    }
}

/// Draws `p` distinct subjects and `k` sequences for each.
///
/// `sequence_counts[s]` is the number of sequences of subject `s`. Sequences are
/// drawn without replacement when a subject has at least `k`, otherwise with
/// replacement. Returns `(subject, sequence)` pairs grouped by subject.
pub fn pk_batch(sequence_counts: &[usize], spec: BatchSpec, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    let eligible: Vec<usize> = (0..sequence_counts.len())
        .filter(|&s| sequence_counts[s] > 0)
        .collect();
    if eligible.len() < spec.p {
        return Err(Error::Config(format!(
            "PK batch needs {} subjects with sequences, dataset has {}",
            spec.p,
            eligible.len()
        )));
    }
    let subjects: Vec<usize> = eligible.choose_multiple(rng, spec.p).copied().collect();
    let mut out = Vec::with_capacity(spec.size());
    for s in subjects {
        let count = sequence_counts[s];
        if count >= spec.k {
            let all: Vec<usize> = (0..count).collect();
            out.extend(all.choose_multiple(rng, spec.k).map(|&q| (s, q)));
        } else {
            out.extend((0..spec.k).map(|_| (s, rng.gen_range(0..count))));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_based(v: Vec<usize>) -> Vec<usize> {
        v.into_iter().map(|i| i + 1).collect()
    }

    #[test]
    fn noncyclic_short_sequence_single_pass() {
        assert_eq!(one_based(noncyclic_sample(5, 8, 0)), [1, 1, 2, 2, 3, 3, 4, 5]);
    }

    #[test]
    fn noncyclic_two_passes() {
        assert_eq!(one_based(noncyclic_sample(2, 5, 0)), [1, 1, 1, 2, 2]);
    }

    #[test]
    fn noncyclic_equal_length_is_whole_sequence() {
        assert_eq!(noncyclic_sample(6, 6, 0), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn cyclic_examples() {
        assert_eq!(one_based(cyclic_sample(5, 8, 0)), [1, 2, 3, 4, 5, 1, 2, 3]);
        assert_eq!(cyclic_sample(1, 4, 0), [0, 0, 0, 0]);
        assert_eq!(cyclic_sample(10, 4, 3), noncyclic_sample(10, 4, 3));
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(one_based(uniform_sample(8, 4)), [1, 3, 5, 7]);
        assert_eq!(one_based(uniform_sample(9, 3)), [1, 4, 7]);
        assert_eq!(uniform_sample(5, 5), (0..5).collect::<Vec<_>>());
        assert_eq!(uniform_sample(3, 5), noncyclic_sample(3, 5, 0));
    }

    #[test]
    fn inference_cap() {
        assert_eq!(inference_indices(10).len(), 10);
        assert_eq!(inference_indices(1000).len(), INFERENCE_FRAME_CAP);
    }

    #[test]
    fn pk_batch_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_batch(&[4; 8], BatchSpec { p: 2, k: 2 }, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[0].0, b[1].0);
        assert_eq!(b[2].0, b[3].0);
        assert_ne!(b[0].0, b[2].0);
        assert_ne!(b[0].1, b[1].1);
    }

    #[test]
    fn pk_batch_repeats_short_subject() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = pk_batch(&[1, 1], BatchSpec { p: 2, k: 4 }, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        assert!(b.iter().all(|&(_, q)| q == 0));
    }

    #[test]
    fn pk_batch_is_seeded() {
        let counts = [3, 5, 2, 7, 4, 4];
        let spec = BatchSpec { p: 3, k: 4 };
        let a = pk_batch(&counts, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = pk_batch(&counts, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pk_batch_rejects_too_few_subjects() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pk_batch(&[3, 0, 2], BatchSpec { p: 3, k: 2 }, &mut rng).is_err());
        assert!(pk_batch(&[3, 3], BatchSpec { p: 2, k: 1 }, &mut rng).is_err());
    }
}

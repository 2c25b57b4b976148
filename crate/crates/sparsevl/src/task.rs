//! Synthetic vision-language tasks.
//!
//! Keyed lookup: the prompt `[QUERY, hi, lo]` names a key by two halves
//! (`hi` of 2, `lo` of 4). The pseudo-image holds four informative tokens,
//! each a marker, one-hot key halves and a one-hot value, laid out on a
//! 2×2 grid of key halves: `(hi, lo) → v`, `(hi, lo') → w`, `(hi', lo) → w`
//! and `(hi', lo') → v` with `w ≠ v`. Any read keyed by a single half, or by
//! none, sees `v` and `w` equally often, so `v` is only recoverable by
//! attending with the combined key, one layer after the halves have been
//! gathered. The rest of the image is noise.
//!
//! The response interleaves two counters of content symbols: `c₀ = v`,
//! `c₁ = v + 4`, `c_{k+1} = c_{k-1} + 1 (mod 9)`; content `c` is followed
//! by `c mod 3` filler tokens. The length is a function of `v` so lengths
//! straddle 50, and the response ends with EOS.
//!
//! Copy: the prompt lists symbols, the response repeats them cyclically.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sparsevl_core::model::EOS_TOKEN;
use sparsevl_core::rng;
use sparsevl_core::train::TrainingSample;

pub const QUERY: usize = 1;
pub const FILLER: usize = 2;
pub const COPY: usize = 3;
pub const KEY_BASE: usize = 4;
pub const NUM_KEYS: usize = 8;
pub const NUM_HI: usize = 2;
pub const NUM_LO: usize = 4;
pub const HI_BASE: usize = KEY_BASE;
pub const LO_BASE: usize = KEY_BASE + NUM_HI;
pub const CONTENT_BASE: usize = KEY_BASE + NUM_KEYS;
pub const NUM_CONTENT: usize = 9;
/// Smallest vocabulary that holds every task token.
pub const MIN_VOCAB: usize = CONTENT_BASE + NUM_CONTENT;
/// Feature width used by informative image tokens (marker + halves + value).
pub const MIN_FEATURE_DIM: usize = 1 + NUM_HI + NUM_LO + NUM_CONTENT;
/// Informative image tokens per keyed-lookup sample.
pub const INFORMATIVE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    KeyedLookup,
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_image: usize,
    pub feature_dim: usize,
    /// Shortest response including EOS.
    pub min_output: usize,
    /// Longest response including EOS.
    pub max_output: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::KeyedLookup,
            n_image: 15,
            feature_dim: 32,
            min_output: 8,
            max_output: 64,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("task.feature_dim {got} below the {need} dimensions the encoding needs")]
    FeatureDim { got: usize, need: usize },
    #[error("task.n_image must be >= {INFORMATIVE} for keyed lookup")]
    TooFewImages,
    #[error("task output lengths must satisfy 2 <= min_output <= max_output")]
    OutputRange,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.feature_dim < MIN_FEATURE_DIM {
            return Err(TaskError::FeatureDim {
                got: self.feature_dim,
                need: MIN_FEATURE_DIM,
            });
        }
        if self.kind == TaskKind::KeyedLookup && self.n_image < INFORMATIVE {
            return Err(TaskError::TooFewImages);
        }
        if self.min_output < 2 || self.min_output > self.max_output {
            return Err(TaskError::OutputRange);
        }
        Ok(())
    }

    /// Response length (with EOS) for value `v` of `NUM_CONTENT`.
    pub fn output_len(&self, v: usize) -> usize {
        let span = self.max_output - self.min_output;
        self.min_output + span * v / (NUM_CONTENT - 1)
    }

    /// Sample `index` of the stream identified by `split`.
    pub fn sample(&self, split: u64, index: u64) -> TrainingSample {
        let mut r = rng::seeded(rng::mix(rng::mix(self.seed, split), index));
        match self.kind {
            TaskKind::KeyedLookup => self.keyed_lookup(&mut r),
            TaskKind::Copy => self.copy(&mut r),
        }
    }

    pub fn samples(&self, split: u64, count: usize) -> Vec<TrainingSample> {
        (0..count as u64).map(|i| self.sample(split, i)).collect()
    }

    fn noise(&self, r: &mut impl Rng) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|_| rng::normal(r) * self.noise_std)
            .collect()
    }

    fn keyed_lookup(&self, r: &mut impl Rng) -> TrainingSample {
        let (hi, lo) = (r.gen_range(0..NUM_HI), r.gen_range(0..NUM_LO));
        let lo_decoy = (lo + r.gen_range(1..NUM_LO)) % NUM_LO;
        let v = r.gen_range(0..NUM_CONTENT);
        let w = (v + r.gen_range(1..NUM_CONTENT)) % NUM_CONTENT;
        let tokens = [(hi, lo, v), (hi, lo_decoy, w), (1 - hi, lo, w), (1 - hi, lo_decoy, v)];
        let slots = rand::seq::index::sample(r, self.n_image, INFORMATIVE).into_vec();
        let mut image: Vec<Vec<f64>> = (0..self.n_image).map(|_| self.noise(r)).collect();
        for (&(h, l, val), &slot) in tokens.iter().zip(&slots) {
            let f = &mut image[slot];
            f.iter_mut().take(MIN_FEATURE_DIM).for_each(|x| *x = 0.0);
            f[0] = 2.0;
            f[1 + h] = 2.0;
            f[1 + NUM_HI + l] = 2.0;
            f[1 + NUM_HI + NUM_LO + val] = 2.0;
        }
        TrainingSample {
            image_features: image,
            text_ids: vec![QUERY, HI_BASE + hi, LO_BASE + lo],
            output_ids: chain(v, self.output_len(v)),
        }
    }

    fn copy(&self, r: &mut impl Rng) -> TrainingSample {
        let k = r.gen_range(3..=6);
        let symbols: Vec<usize> = (0..k).map(|_| CONTENT_BASE + r.gen_range(0..NUM_CONTENT)).collect();
        let len = r.gen_range(self.min_output..=self.max_output);
        let mut out: Vec<usize> = symbols.iter().cycle().take(len - 1).copied().collect();
        out.push(EOS_TOKEN);
        let mut text = vec![COPY];
        text.extend(&symbols);
        TrainingSample {
            image_features: (0..self.n_image).map(|_| self.noise(r)).collect(),
            text_ids: text,
            output_ids: out,
        }
    }
}

/// The `k`-th content symbol of the interleaved counters started at `v`.
pub fn content_at(v: usize, k: usize) -> usize {
    let start = if k % 2 == 0 { v } else { v + 4 };
    (start + k / 2) % NUM_CONTENT
}

/// Response from value `v` of total length `len` (EOS last).
pub fn chain(v: usize, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    'outer: for k in 0.. {
        let c = content_at(v, k);
        for tok in core::iter::once(CONTENT_BASE + c).chain(core::iter::repeat(FILLER).take(c % 3)) {
            if out.len() == len - 1 {
                break 'outer;
            }
            out.push(tok);
        }
    }
    out.push(EOS_TOKEN);
    out
}

/// Indices of the informative image tokens of a keyed-lookup sample.
pub fn informative_slots(sample: &TrainingSample) -> Vec<usize> {
    sample
        .image_features
        .iter()
        .enumerate()
        .filter(|(_, f)| f[0] == 2.0)
        .map(|(i, _)| i)
        .collect()
}

//! Ratio-controlled mixing of two record sources.

use thiserror::Error;

use crate::numkit::Rng;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("source {0} is empty")]
    EmptySource(&'static str),
    #[error("ratio components must both be >= 1, got {0}:{1}")]
    BadRatio(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceLabel {
    A,
    B,
}

/// Infinite deterministic stream of (label, index) draws. The label is a
/// weighted Bernoulli (a/(a+b) for source A), the index uniform within the
/// chosen source. Two RNG draws per item, label first.
#[derive(Debug, Clone)]
pub struct MixedSampler {
    len_a: u64,
    len_b: u64,
    threshold: f64,
    rng: Rng,
}

impl MixedSampler {
    pub fn new(len_a: usize, len_b: usize, ratio: (u32, u32), seed: u64) -> Result<Self, SamplerError> {
        if len_a == 0 {
            return Err(SamplerError::EmptySource("A"));
        }
        if len_b == 0 {
            return Err(SamplerError::EmptySource("B"));
        }
        if ratio.0 < 1 || ratio.1 < 1 {
            return Err(SamplerError::BadRatio(ratio.0, ratio.1));
        }
        Ok(MixedSampler {
            len_a: len_a as u64,
            len_b: len_b as u64,
            threshold: ratio.0 as f64 / (ratio.0 + ratio.1) as f64,
            rng: Rng::seed_from(seed),
        })
    }

    pub fn draw(&mut self) -> (SourceLabel, usize) {
        let label = if self.rng.next_f64() < self.threshold {
            SourceLabel::A
        } else {
            SourceLabel::B
        };
        let len = match label {
            SourceLabel::A => self.len_a,
            SourceLabel::B => self.len_b,
        };
        (label, self.rng.below(len) as usize)
    }

    /// Advance past `n` draws; used when resuming training mid-stream.
    pub fn skip_draws(&mut self, n: u64) {
        for _ in 0..n {
            self.draw();
        }
    }
}

impl Iterator for MixedSampler {
    type Item = (SourceLabel, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.draw())
    }
}

//! Seeded, stream-splittable random number generation.
//!
//! Built on ChaCha8: a 64-bit seed plus a 64-bit stream id identify an
//! independent random stream, and the word position is enough to resume a
//! stream mid-flight. Identical seed and call sequence always reproduce
//! the same draws, so parallel workers get `fork_stream(i)` handles and
//! checkpoints store `(seed, stream, word_pos)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Prng {
    inner: ChaCha8Rng,
    seed: u64,
}

/// Serializable snapshot of a [`Prng`], sufficient for bit-exact resume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position split into halves for plain-integer encoding.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Independent stream with the same seed. Stream 0 is the one
    /// `new` returns, so callers should fork with ids >= 1.
    pub fn fork_stream(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Prng {
            inner,
            seed: self.seed,
        }
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_stream(state.stream);
        let pos = ((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128;
        inner.set_word_pos(pos);
        Prng {
            inner,
            seed: state.seed,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

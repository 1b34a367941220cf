//! Deterministic random streams.
//!
//! Every draw is a function of `(seed, stream, position)`: the generator is
//! ChaCha8 keyed by the seed with an explicit stream id, and each Gaussian or
//! Rademacher sample consumes a fixed number of words, so element `e` of a
//! sketch matrix is the same value no matter how the matrix is traversed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids keeping independent consumers of one seed apart.
pub mod stream {
    pub const SKETCH: u64 = 0x5eed_0001;
    pub const SAMPLE_INDEX: u64 = 0x5eed_0002;
    pub const FEATURES: u64 = 0x5eed_0003;
    pub const PLANTED: u64 = 0x5eed_0004;
    pub const LABEL_NOISE: u64 = 0x5eed_0005;
    pub const INIT: u64 = 0x5eed_0006;
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct CounterRng {
    inner: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Moves to the `index`-th 64-bit word of the stream.
    pub fn seek(&mut self, index: u64) {
        self.inner.set_word_pos(u128::from(index) * 2);
    }

    /// Current position in 64-bit words.
    pub fn position(&self) -> u64 {
        (self.inner.get_word_pos() / 2) as u64
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal by Box–Muller; always consumes two words.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (TWO_PI * u2).cos()
    }

    /// `±1` with equal probability; consumes two words so it lines up with
    /// [`CounterRng::standard_normal`] positions.
    #[inline]
    pub fn rademacher(&mut self) -> f64 {
        let bit = self.next_u64() >> 63;
        self.next_u64();
        if bit == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in `[0, n)`.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }
}

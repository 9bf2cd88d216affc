//! Portable seeded randomness for episode generation.
//!
//! The generator is ChaCha8 (RFC 7539 block function, 8 rounds) keyed with the
//! seed as a little-endian `u64` in the first eight key bytes, remaining key
//! bytes zero, stream 0. Derived draws are defined here rather than borrowed
//! from a sampling library so the stream can be reproduced in any language:
//!
//! - `uniform()`: `(next_u64 >> 11) * 2^-53`, a double in `[0, 1)`.
//! - `index(n)`: `(next_u64 * n) >> 64` computed in 128 bits, in `[0, n)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli draw; always consumes exactly one word.
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index over an empty range");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }
}

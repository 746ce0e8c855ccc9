//! Deterministic counter-based random streams.
//!
//! Each draw hashes (seed, stream_id, counter) through the SplitMix64
//! finalizer, so identical (seed, stream_id) pairs replay identical
//! sequences on any platform and streams split from one seed are
//! statistically independent.

use super::{NumericsError, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// Child stream with an id derived from this stream's id; the parent's
    /// counter is untouched.
    pub fn split(&self, child: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: mix(self.stream_id.wrapping_mul(GOLDEN) ^ child.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let key = mix(self.seed ^ mix(self.stream_id.wrapping_mul(GOLDEN)));
        mix(key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller transform on two uniform draws.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform01(); // (0, 1]
        let u2 = self.uniform01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling over the largest multiple of n below 2^64.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Uniformly chosen subset of `size` elements from `ground`, without
    /// replacement, returned in ascending order.
    pub fn subset(&mut self, ground: &[usize], size: usize) -> Result<Vec<usize>> {
        if size > ground.len() {
            return Err(NumericsError::SubsetTooLarge {
                requested: size,
                available: ground.len(),
            });
        }
        let mut pool = ground.to_vec();
        for i in 0..size {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        let mut chosen = pool[..size].to_vec();
        chosen.sort_unstable();
        Ok(chosen)
    }
}

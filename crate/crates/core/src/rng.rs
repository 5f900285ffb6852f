//! Seeded, counter-based random streams.
//!
//! Backed by ChaCha8, whose integer output is specified independently of
//! platform. Independent streams for the same seed (gate noise, data,
//! initialization) use ChaCha's stream selector so that drawing from one
//! never shifts another.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ALGORITHM: &str = "chacha8";

/// Named stream selectors used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const GATE_INIT: u64 = 2;
    pub const GATE_NOISE: u64 = 3;
    pub const DATA: u64 = 4;
    pub const TEACHER: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const TEACHER_NOISE: u64 = 7;
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    draws: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, seed, draws: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of primitive draws taken so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[eps, 1 - eps]`.
    pub fn uniform_open(&mut self, eps: f64) -> f64 {
        eps + (1.0 - 2.0 * eps) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        self.draws += 1;
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.inner.random_range(0..n)
    }
}

//! Counter-based deterministic randomness.
//!
//! Every random draw in the system is keyed: a global seed is mixed with a
//! purpose string and an index to derive an independent ChaCha8 stream, so
//! any subsystem (mask plans, dropout, init, shuffles) is reproducible in
//! isolation and insensitive to the order other subsystems draw in.

use alloc::string::String;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

/// Derivation key: (seed, purpose, index) -> independent stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngKey {
    seed: u64,
    path: String,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey {
            seed,
            path: String::new(),
        }
    }

    /// Derive a child key. Chaining is supported:
    /// `key.derive("epoch", 3).derive("sample", 41)`.
    pub fn derive(&self, purpose: &str, index: u64) -> RngKey {
        let mut h = self.seed;
        for b in self.path.bytes().chain(purpose.bytes()) {
            h = fnv_step(h, b);
        }
        h = splitmix64(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        RngKey {
            seed: h,
            path: alloc::format!("{}/{}:{}", self.path, purpose, index),
        }
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng {
            inner: ChaCha8Rng::seed_from_u64(self.seed),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

fn fnv_step(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8-backed stream with the draw helpers the model needs.
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform over the inclusive integer range.
    pub fn uniform_int(&mut self, lo: u64, hi: u64) -> u64 {
        Uniform::new_inclusive(lo, hi).sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("std >= 0").sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_range(0.0..1.0) < p
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.uniform_int(0, i as u64) as usize;
            xs.swap(i, j);
        }
    }

    pub fn raw(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn same_key_same_stream() {
        let k = RngKey::new(42).derive("mask", 7);
        let a: Vec<f64> = {
            let mut r = k.rng();
            (0..8).map(|_| r.uniform(0.0, 1.0)).collect()
        };
        let b: Vec<f64> = {
            let mut r = k.rng();
            (0..8).map(|_| r.uniform(0.0, 1.0)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn different_purposes_decorrelate() {
        let k = RngKey::new(42);
        let a = k.derive("mask", 0).rng().uniform(0.0, 1.0);
        let b = k.derive("dropout", 0).rng().uniform(0.0, 1.0);
        assert_ne!(a, b);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut xs: Vec<u32> = (0..100).collect();
        let mut r = RngKey::new(1).derive("shuffle", 0).rng();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<u32>>());
    }
}

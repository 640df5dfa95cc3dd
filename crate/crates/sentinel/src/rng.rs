//! Seeded randomness.
//!
//! Every random draw in the crate flows through a ChaCha stream seeded
//! either directly or from a (seed, label) pair, so staged pipeline runs
//! reproduce combined runs byte for byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub struct SplitRng {
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn seeded(seed: u64) -> Self {
        SplitRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from a run seed and a stage/purpose label.
    pub fn for_label(seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        SplitRng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal via Box-Muller.
    pub fn standard_normal(&mut self) -> f64 {
        let u1: f64 = self.inner.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.inner.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gen_range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..hi)
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        // Fisher-Yates, explicit so the draw sequence is pinned.
        for i in (1..v.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            v.swap(i, j);
        }
    }
}

//! Seeded, platform-stable random streams.
//!
//! Each consumer (init, data, shuffling, ...) gets its own named substream so
//! adding a consumer never perturbs the draws of another. Streams are backed
//! by ChaCha8 keyed by the run seed, with the stream id derived from the
//! consumer name; all derived values (uniforms, normals, shuffles) are
//! produced by in-crate arithmetic so the draw sequence is identical across
//! runs and platforms for a given seed.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One named random substream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    /// Stream `name` under the run seed. Same (seed, name) gives the same
    /// sequence; different names give independent streams.
    pub fn new(seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a64(name));
        RngStream {
            seed,
            counter: 0,
            rng,
            spare_normal: None,
        }
    }

    /// Derive a child stream, e.g. `stream.substream("noise").substream("train")`.
    pub fn substream(&self, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base = self.rng.get_stream();
        rng.set_stream(base ^ fnv1a64(name).rotate_left(17));
        RngStream {
            seed: self.seed,
            counter: 0,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of raw 64-bit draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; the spare value is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n) without modulo bias (rejection sampling).
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_usize: empty range");
        let n64 = n as u64;
        let threshold = (u64::MAX % n64).wrapping_add(1) % n64;
        loop {
            let v = self.next_u64();
            if v >= threshold {
                return (v % n64) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42, "init");
        let mut b = RngStream::new(42, "init");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.draws(), 100);
    }

    #[test]
    fn named_streams_are_independent() {
        // Draws from "data" are the same whether or not "init" was consumed.
        let mut lone = RngStream::new(7, "data");
        let expected: Vec<u64> = (0..32).map(|_| lone.next_u64()).collect();

        let mut init = RngStream::new(7, "init");
        for _ in 0..1000 {
            init.next_u64();
        }
        let mut data = RngStream::new(7, "data");
        let got: Vec<u64> = (0..32).map(|_| data.next_u64()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn different_names_differ() {
        let mut a = RngStream::new(3, "a");
        let mut b = RngStream::new(3, "b");
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn normal_has_reasonable_moments() {
        let mut rng = RngStream::new(123, "normal");
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(5, "shuffle");
        let mut v: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_usize_covers_range() {
        let mut rng = RngStream::new(9, "u");
        let mut seen = [false; 7];
        for _ in 0..500 {
            seen[rng.uniform_usize(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}

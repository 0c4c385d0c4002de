//! Reproducible random streams.
//!
//! Every stream is keyed by a `(seed, stream_id)` pair on top of a
//! counter-based generator, so any component (a client in a given round, the
//! dataset synthesizer, an augmentation draw) can own an independent stream
//! that replays identically on every platform and in any execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};

/// A seeded, splittable random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent stream from this one's key; the child's draws do
    /// not depend on how much of the parent has been consumed.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream_id, tag))
    }

    /// One standard-normal draw.
    pub fn next_gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// `n` i.i.d. standard-normal draws, advancing the stream.
    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn next_bool(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p.clamp(0.0, 1.0))
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// One draw from a symmetric Dirichlet with concentration `alpha` over
    /// `k` components. For `k == 1` the only point on the simplex is 1.
    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        assert!(k >= 1 && alpha > 0.0);
        if k == 1 {
            return vec![1.0];
        }
        let dist = Dirichlet::new_with_size(alpha, k).expect("valid dirichlet parameters");
        dist.sample(&mut self.rng)
    }
}

/// SplitMix64-style mixing of a stream id and a tag; used to derive
/// per-client, per-round stream keys without collisions in practice.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b)
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream key for a labelled component, e.g. `stream_key(&[3, client, round])`.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x853c_49e6_748f_ea9b, |acc, &p| mix(acc, p))
}

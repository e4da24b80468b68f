//! Deterministic per-episode random streams.
//!
//! Every random draw in the lab flows from a `(base_seed, episode_index)`
//! pair, so episodes can be generated in any order or on any worker and still
//! reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit mix of two words.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(32).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// Sub-stream tags, so that drawing a task and drawing its inputs never share
/// random numbers.
pub mod stream {
    pub const TASK: u64 = 1;
    pub const INPUTS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const OOD: u64 = 4;
    pub const INIT: u64 = 5;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeSeed {
    pub base_seed: u64,
    pub episode_index: u64,
}

impl EpisodeSeed {
    pub fn new(base_seed: u64, episode_index: u64) -> Self {
        Self {
            base_seed,
            episode_index,
        }
    }

    /// The derived 64-bit stream seed.
    pub fn stream_seed(&self) -> u64 {
        mix(self.base_seed, self.episode_index)
    }

    /// Independent generator for one purpose (see [`stream`]).
    pub fn rng(&self, purpose: u64) -> Rng {
        let mut r = Rng::seed_from_u64(self.stream_seed());
        r.set_stream(purpose);
        r
    }

    /// Seed of a nested episode, e.g. a retry or a pooled task index.
    pub fn child(&self, index: u64) -> EpisodeSeed {
        EpisodeSeed::new(self.stream_seed(), index)
    }
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    rng.random_range(lo..=hi)
}

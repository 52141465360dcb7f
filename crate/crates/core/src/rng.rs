//! Seedable, stream-addressable random sources.
//!
//! Every consumer derives its generator from a `(seed, stream)` pair so that
//! batch assembly and per-clip generation are reproducible regardless of the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor2;

pub type Rng = ChaCha8Rng;

/// Generator for the given seed on an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two integers into a child seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix of independent standard-normal draws.
pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|_| normal(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("length matches by construction")
}

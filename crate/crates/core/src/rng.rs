//! Seeded, counter-based random streams.
//!
//! Every random draw in the crate goes through ChaCha20 keyed by a user seed,
//! with the stream id selecting an independent sequence (replicate index,
//! subsample index, ...). Normal variates use the inverse CDF so that a given
//! `(seed, stream)` produces the same numbers on every platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::special::normal_quantile;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Uniform draw on the open interval (0, 1).
pub fn open_uniform<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    normal_quantile(open_uniform(rng))
}

/// Uniform integer in `0..n` by rejection (no modulo bias).
pub fn below<R: RngCore>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0);
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % n) as usize;
        }
    }
}

/// Fisher–Yates shuffle.
pub fn shuffle<R: RngCore, T>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

//! Deterministic random streams. Every consumer derives its own stream from
//! `(seed, stream id)` so adding a draw in one place never shifts another.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// A permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// FNV-1a over the bit patterns of `values`, mixed with `salt`.
pub fn hash_f64s(values: &[f64], salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

// Stream ids.
pub(crate) const STREAM_CLASS_LATENT: u64 = 1;
pub(crate) const STREAM_INSTANCE: u64 = 2;
pub(crate) const STREAM_PROJECTION: u64 = 3;
pub(crate) const STREAM_SHIFT: u64 = 4;
pub(crate) const STREAM_GEOMETRY: u64 = 5;
pub(crate) const STREAM_SPLIT: u64 = 6;
pub(crate) const STREAM_VIEW: u64 = 7;
pub(crate) const STREAM_INIT: u64 = 8;
pub(crate) const STREAM_SHUFFLE: u64 = 9;
pub(crate) const STREAM_EPISODE: u64 = 10;
pub(crate) const STREAM_PROBE: u64 = 11;

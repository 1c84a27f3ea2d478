//! Counter-based noise: every draw is a pure function of a key tuple, so the
//! values do not depend on evaluation order or thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tuple of integers into one 64-bit key.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5357_4e5f_4b45_5931, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Generator seeded from a key tuple.
pub fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// `n` standard-normal draws for key `(seed, sequence, t, layer)`.
pub fn normals(seed: u64, sequence: u64, t: u64, layer: u64, n: usize) -> Vec<f64> {
    let mut rng = keyed_rng(&[seed, sequence, t, layer]);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

//! Seeded randomness. Every random operation takes an explicit seed or
//! generator; there is no global state.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent child seed (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal<T: Scalar>(rng: &mut Rng) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    if hi <= lo {
        return lo;
    }
    rng.random_range(lo..hi)
}

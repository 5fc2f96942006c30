//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream type used throughout the crate.
pub type RandomStream = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent child seed from a base seed, a stream label and an
/// index. Used to give every (trial, image, sample) its own stream so results
/// do not depend on evaluation order.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn stream(base: u64, label: &str, index: u64) -> RandomStream {
    RandomStream::seed_from_u64(derive_seed(base, label, index))
}

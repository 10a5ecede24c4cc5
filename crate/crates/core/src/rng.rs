//! Named sub-seeds. All randomness in a run descends from one top-level seed
//! through [`derive_seed`], so any component can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a label into a parent seed.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = splitmix64(parent);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Mix a sequence of integers (epoch, step, example, ...) into a parent seed.
pub fn derive_seed_idx(parent: u64, idx: &[u64]) -> u64 {
    idx.iter().fold(splitmix64(parent), |h, &i| splitmix64(h ^ i))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

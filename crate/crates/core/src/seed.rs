//! Named sub-seeds fanned out from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::textenc::stable_hash;

/// Derives an independent seed for `purpose` (e.g. `"negatives"`, `"init"`).
pub fn derive(seed: u64, purpose: &str) -> u64 {
    stable_hash(seed, purpose.as_bytes())
}

pub fn rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, purpose))
}

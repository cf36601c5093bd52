//! Deterministic derivation of independent rng streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Run-local random generator. ChaCha keeps streams identical across platforms.
pub type SearchRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices, e.g.
/// `(run_seed, [generation, candidate_index])`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> SearchRng {
    SearchRng::seed_from_u64(derive(base, path))
}

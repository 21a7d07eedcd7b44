//! Reproducible, splittable random number streams.
//!
//! Monte Carlo replication derives one independent stream per sample index
//! from a single base seed, so runs are reproducible regardless of how the
//! samples are distributed over threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function; bijective mixer over u64.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 256-bit seed from `(base_seed, index)` by a counter-based split.
///
/// Distinct `(base_seed, index)` pairs give distinct seeds; streams for
/// different indices can be consumed concurrently.
pub fn derive_seed(base_seed: u64, index: u64) -> [u8; 32] {
    let mut state = base_seed ^ index.wrapping_mul(0xd605_bbb5_8c8a_bc03);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// Stream RNG for sample `index` of the Monte Carlo run seeded `base_seed`.
pub fn stream_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(base_seed, index))
}

/// Collapses `(base_seed, index)` to a single derived u64 seed.
pub fn mix_seed(base_seed: u64, index: u64) -> u64 {
    let mut state = base_seed ^ index.wrapping_mul(0xd605_bbb5_8c8a_bc03);
    splitmix64(&mut state)
}

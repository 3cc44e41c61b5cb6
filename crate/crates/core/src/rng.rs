//! Deterministic seed derivation.
//!
//! Every stochastic stage (generation, subset selection, per-example
//! augmentation draws) derives its own seed from a parent seed and a fixed
//! tag path, so independent stages never share rng state and results are
//! reproducible regardless of evaluation order or thread scheduling.

use rand_chacha::ChaCha8Rng;

/// The rng used everywhere in this crate.
pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ t);
    }
    state
}

/// Convenience: rng seeded from a derived path.
pub fn derived_rng(seed: u64, tags: &[u64]) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(derive_seed(seed, tags))
}

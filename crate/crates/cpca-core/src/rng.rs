//! Seed derivation for reproducible sub-streams.
//!
//! Every source of randomness in the crate is a pure function of a master
//! seed plus a small tag path, so resuming a run at iteration t replays the
//! exact stream the uninterrupted run would have used at t.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a tag path.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

/// Deterministic RNG for a (master, tag path) pair.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Stream tags used across the crate. Values are arbitrary but fixed.
pub mod tag {
    pub const LABELS: u64 = 0x4c41_4245;
    pub const STYLE: u64 = 0x5354_594c;
    pub const INIT: u64 = 0x494e_4954;
    pub const BATCH: u64 = 0x4241_5443;
    pub const PERM: u64 = 0x5045_524d;
    pub const PERTURB: u64 = 0x5054_5242;
    pub const PHASE_PRETRAIN: u64 = 1;
    pub const PHASE_ADAPT: u64 = 2;
    pub const PHASE_SELFTRAIN: u64 = 3;
    pub const SOURCE: u64 = 10;
    pub const TARGET: u64 = 11;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, &[tag::LABELS, 0]);
        let b = derive_seed(7, &[tag::LABELS, 0]);
        let c = derive_seed(7, &[tag::LABELS, 1]);
        let d = derive_seed(8, &[tag::LABELS, 0]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_reproduce() {
        let x: f64 = stream(42, &[tag::STYLE, 3]).gen();
        let y: f64 = stream(42, &[tag::STYLE, 3]).gen();
        assert_eq!(x, y);
    }
}

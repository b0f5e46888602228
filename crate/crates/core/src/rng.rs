//! Deterministic derivation of independent random streams from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `keys` into `seed` and returns a generator for that stream.
pub fn derive_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let h = keys.iter().fold(splitmix64(seed), |h, &k| splitmix64(h ^ k));
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream tags keeping generators for different purposes apart.
pub(crate) mod domain {
    pub const SCENE: u64 = 0x53_4345_4e45;
    pub const SPLIT: u64 = 0x53_504c_4954;
    pub const BATCH: u64 = 0x42_4154_4348;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = derive_rng(7, &[1, 2]).gen();
        let b: u64 = derive_rng(7, &[1, 2]).gen();
        let c: u64 = derive_rng(7, &[2, 1]).gen();
        let d: u64 = derive_rng(8, &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}

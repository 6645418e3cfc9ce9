//! Seeding.
//!
//! All randomness goes through [`FpRng`], the 128-bit-state PCG generator
//! with XSL-RR output (`Pcg64` from `rand_pcg`). Independent streams are
//! derived from a user seed plus a list of stream tags (parameter name hash,
//! epoch, batch index, ...) through SplitMix64 finalisation, so any stream
//! can be recreated without replaying the others.

use rand::SeedableRng;

pub type FpRng = rand_pcg::Pcg64;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with stream tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn seeded_rng(seed: u64, tags: &[u64]) -> FpRng {
    FpRng::seed_from_u64(derive_seed(seed, tags))
}

/// FNV-1a, used to turn parameter names into stream tags.
pub(crate) fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

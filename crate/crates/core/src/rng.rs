//! Counter-derived random streams.
//!
//! Every stream is keyed by a master seed and a path of counters (condition,
//! replication, draw, individual, ...), so results never depend on the order
//! in which parallel tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of counters into a new 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

// Stream tags keep unrelated uses of the same counters apart.
pub(crate) const TAG_NULL_REFERENCE: u64 = 0x6e75_6c6c;
pub(crate) const TAG_LOADINGS: u64 = 0x6c6f_6164;
pub(crate) const TAG_SAMPLE: u64 = 0x7361_6d70;

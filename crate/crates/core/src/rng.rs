//! Named random streams.
//!
//! Every random quantity is drawn from a ChaCha8 generator keyed by the user
//! seed, with the 64-bit stream id derived from `(cell index, purpose tag)`.
//! Adding a new purpose tag therefore never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags used by the library. Free-form tags are also accepted.
pub mod tag {
    pub const DESIGN: &str = "design";
    pub const NOISE: &str = "noise";
    pub const MONTE_CARLO: &str = "monte_carlo";
    pub const LOO_INDICES: &str = "loo_indices";
    pub const TRACE_CHECK: &str = "trace_check";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn hash_tag(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn stream_id(cell: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(cell) ^ hash_tag(tag))
}

/// Generator for `(seed, cell, tag)`.
pub fn stream(seed: u64, cell: u64, tag: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(cell, tag));
    rng
}

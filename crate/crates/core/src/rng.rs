//! Keyed, hierarchical seed derivation.
//!
//! Every random draw in the simulator comes from a stream identified by
//! `(master seed, purpose tag, indices...)`. Streams with different keys are
//! statistically independent, so subsystems never share generator state and
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a 64-bit sub-seed from a master seed, a purpose tag and a path of indices.
pub fn derive_seed(master: u64, tag: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(fnv1a(tag)));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

/// Generator for the stream keyed by `(master, tag, path)`.
pub fn stream(master: u64, tag: &str, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, tag, path))
}

/// Generator seeded directly from a 64-bit value.
pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

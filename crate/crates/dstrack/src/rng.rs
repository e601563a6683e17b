//! Seed derivation. Every random decision in the pipeline flows from one
//! root seed through `derive_seed`, so runs are reproducible and per-dialog
//! streams are independent of iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good enough to decorrelate derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of stream tags
/// (e.g. `[epoch, dialog_index]`).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

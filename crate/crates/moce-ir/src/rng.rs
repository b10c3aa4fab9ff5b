//! Deterministic RNG streams.
//!
//! Every random decision in the crate (init, data synthesis, routing noise,
//! augmentation) draws from a ChaCha8 stream derived from a root seed plus a
//! list of tags. Parallel and serial execution see identical streams because
//! streams are keyed, never shared.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used only to fold tags into stream keys.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a stream from a root seed and a tag path, e.g.
/// `stream(seed, &[TAG_TRAIN, step, sample])`.
pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = splitmix64(root);
    for &t in tags {
        key = splitmix64(key ^ t.wrapping_mul(0x2545f4914f6cdd1d));
    }
    ChaCha8Rng::seed_from_u64(key)
}

// Stream namespaces. Distinct constants keep training, evaluation and
// initialisation disjoint for any shared root seed.
pub const TAG_INIT: u64 = 0x01;
pub const TAG_TRAIN_DATA: u64 = 0x02;
pub const TAG_ROUTE_NOISE: u64 = 0x03;
pub const TAG_EVAL_DATA: u64 = 0x04;
pub const TAG_AUGMENT: u64 = 0x05;
pub const TAG_CLEAN: u64 = 0x06;
pub const TAG_DEGRADE: u64 = 0x07;

//! Seed splitting.
//!
//! Every random decision in the lab draws from a ChaCha8 stream seeded by
//! `mix(master, tag, index)`, where `tag` names the purpose (dataset
//! generation, augmentation, batch order, ...) and `index` the item within
//! it. Streams therefore do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tags {
    pub const DATASET_TRAIN: u64 = 0x10;
    pub const DATASET_TEST: u64 = 0x11;
    pub const INIT: u64 = 0x20;
    pub const SHUFFLE: u64 = 0x30;
    pub const AUGMENT: u64 = 0x31;
    pub const FGSM: u64 = 0x32;
    pub const CORRUPT: u64 = 0x40;
    pub const SUSCEPTIBILITY: u64 = 0x50;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derived 64-bit seed for `(master, tag, index)`.
pub fn mix(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag ^ splitmix64(index)))
}

pub fn stream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, tag, index))
}

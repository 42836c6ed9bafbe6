//! Seed hierarchy. Every random stream in the pipeline is derived from a
//! single root seed and a path of labels, so components never share a stream
//! and adding one does not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `label` under `parent`.
pub fn derive(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded with the parent through splitmix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(parent ^ splitmix64(h))
}

/// Child seed for an indexed item (subject, epoch, batch) under `parent`.
pub fn derive_index(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(parent, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

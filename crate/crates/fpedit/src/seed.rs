//! Named sub-seed derivation.
//!
//! Every random choice in the pipeline flows from one global `u64` seed.
//! Independent stages (parameter init, corpus shuffles, key sampling,
//! stochastic decoding trials, ...) derive their own stream by hashing a
//! label and an index into the global seed. The scheme is a fixed
//! FNV-1a/SplitMix64 combination — stable across platforms and releases,
//! unlike `DefaultHasher`.

/// Derive the sub-seed for `(label, index)` under `base`.
pub fn subseed(base: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV offset basis
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3); // FNV prime
    }
    splitmix64(base ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Deterministic derivation of RNG streams from one master seed.
//!
//! Every random choice in a run (shuffles, probe vectors, random starts,
//! posterior samples) draws from a ChaCha generator seeded with
//! `mix(master, stream)`, where the stream key names the purpose and epoch.
//! Reruns with the same master seed therefore reproduce bit-identical
//! artifacts regardless of evaluation order.

/// Splitmix64-style finalizer over (seed, stream).
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream-key namespaces. Epoch-scoped keys add the epoch to the base.
pub mod streams {
    /// Per-epoch batch shuffling: `SHUFFLE + epoch`.
    pub const SHUFFLE: u64 = 0x1000_0000_0000_0000;
    /// Curvature probes: `CURVATURE + epoch`.
    pub const CURVATURE: u64 = 0x2000_0000_0000_0000;
    /// Fixed curvature evaluation subsample (epoch-independent).
    pub const EVAL_BATCH: u64 = 0x3000_0000_0000_0000;
}

//! Seeded, schedule-independent random streams.
//!
//! Every stochastic unit of work (one GA cell, one event, one replicate)
//! draws from its own ChaCha stream whose id is a stable hash of the work
//! key, so results do not depend on thread count or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a over a sequence of byte fields, with a separator between fields.
pub fn stream_key(fields: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for field in fields {
        for &b in *field {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub fn stream(seed: u64, key: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

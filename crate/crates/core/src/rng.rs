//! Counter-keyed random substreams.
//!
//! Every Monte-Carlo task (a simulation replicate, a bootstrap draw, a lottery
//! order) gets its own ChaCha8 stream derived from the user seed and a short
//! path of integer keys. Tasks can therefore run in any order, on any number
//! of threads, and still see exactly the same random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as SubstreamRng;

/// Domain tags that keep independent consumers of one seed apart.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const BOOTSTRAP: u64 = 0x02;
    pub const TRUTH: u64 = 0x03;
    pub const PREFERENCES: u64 = 0x04;
    pub const LOTTERY: u64 = 0x05;
    pub const PROPENSITY: u64 = 0x06;
    pub const OUTCOMES: u64 = 0x07;
    pub const REFERENCE: u64 = 0x08;
    pub const EIGEN: u64 = 0x09;
    pub const TRUTH_MC: u64 = 0x0a;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(seed: u64, keys: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    state
}

/// A child seed for a nested consumer that takes a plain `u64` seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    splitmix64(mix(seed, keys) ^ 0x5851_f42d_4c95_7f2d)
}

/// Mixes `seed` with `keys` into a 256-bit ChaCha key.
pub fn substream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = mix(seed, keys);
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

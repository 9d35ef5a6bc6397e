//! Counter-based seed derivation.
//!
//! Every random draw in generation is keyed by a tuple of integers hashed into
//! a fresh ChaCha stream, so any worker can produce any index without sharing
//! state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an ordered key tuple into a single 64-bit seed.
pub fn derive_seed(key: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C908u64;
    for &k in key {
        h = splitmix64(h ^ splitmix64(k));
    }
    h
}

pub fn rng_for(key: &[u64]) -> Rng {
    let seed = derive_seed(key);
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(seed.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stable 64-bit tag for a string, used to fold names into seed keys.
pub fn tag(s: &str) -> u64 {
    s.bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! key is derived from the 64-bit master seed and whose stream id is derived
//! from a `(tag, index)` pair. A stream therefore depends only on
//! `(master_seed, tag, index)`, never on which worker consumes it or in which
//! order, so parallel and serial runs produce bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Stream = ChaCha8Rng;

/// Module tags used in the stream derivation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum Tag {
    Field = 1,
    Anchors = 2,
    Chain = 3,
    Blocks = 4,
    Zeta = 5,
    Tilted = 6,
    Nearby = 7,
    NuEff = 8,
    WhiteNoise = 9,
    Walkers = 10,
    Realization = 11,
    Bootstrap = 12,
    Validation = 13,
    Invariant = 14,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root of the stream tree. Cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    pub master_seed: u64,
}

impl Streams {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// The stream for `(tag, index)`.
    pub fn stream(&self, tag: Tag, index: u64) -> Stream {
        let mut key_state = self.master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut key_state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut id_state = (tag as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ index;
        rng.set_stream(splitmix64(&mut id_state) ^ index.rotate_left(17));
        rng
    }

    /// A child root for a sub-experiment, e.g. one realization of a field.
    pub fn child(&self, tag: Tag, index: u64) -> Streams {
        let mut s = self.master_seed ^ (tag as u64).rotate_left(32) ^ index.wrapping_mul(0xA24B_AED4_963E_E407);
        Streams::new(splitmix64(&mut s))
    }
}

//! Counter-based, splittable random streams.
//!
//! A single master seed becomes a ChaCha key; every stochastic component
//! derives its own stream id from a path of `(label, index)` pairs. Two
//! streams with different paths never share keystream blocks, and the
//! values a component sees do not depend on which thread runs it or in
//! what order sibling components execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used by every chain in the crate.
pub type ChainRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a, used only to turn component labels into 64-bit tags.
const fn label_tag(label: &str) -> u64 {
    let bytes = label.as_bytes();
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    hash
}

/// A node in the seed derivation tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: [u8; 32],
    stream: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = master;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { key, stream: 0 }
    }

    /// Derive the child stream `(label, index)`.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let tag = label_tag(label);
        let stream = splitmix64(
            splitmix64(self.stream ^ tag.rotate_left(17)) ^ index.wrapping_mul(GOLDEN),
        );
        Self {
            key: self.key,
            stream,
        }
    }

    /// A fresh generator positioned at the start of this node's stream.
    pub fn rng(&self) -> ChainRng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng
    }

    /// A 64-bit seed summarizing this node, for APIs that take plain seeds.
    pub fn seed(&self) -> u64 {
        let k = u64::from_le_bytes(self.key[..8].try_into().unwrap());
        splitmix64(k ^ self.stream)
    }
}

/// Shorthand for `SeedTree::new(seed).rng()`.
pub fn rng_from_seed(seed: u64) -> ChainRng {
    SeedTree::new(seed).rng()
}

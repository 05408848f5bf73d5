//! Counter-based random streams.
//!
//! Every random draw in a simulation is keyed by `(seed, node, iteration,
//! purpose)`. The key is hashed into a fresh ChaCha seed, so a node's draws in
//! a round never depend on how many draws other nodes made or on the order in
//! which rounds were scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Batch = 1,
    Mask = 2,
    Sparsify = 3,
    Graph = 4,
    Data = 5,
    Partition = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub node: u64,
    pub iteration: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, node: usize, iteration: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            node: node as u64,
            iteration,
            purpose,
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut state = splitmix64(self.seed ^ 0x5344_4d2d_4453_4744);
        state = splitmix64(state ^ self.purpose as u64);
        state = splitmix64(state ^ self.node);
        state = splitmix64(state ^ self.iteration);
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha12Rng::from_seed(bytes)
    }
}

/// Derive an independent 64-bit seed, e.g. one per sweep entry.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Seeded random streams, one per `(master seed, node, purpose)` triple.
//!
//! Streams are ChaCha8 generators whose 256-bit key is expanded from the
//! triple with SplitMix64. Deriving a stream never touches global state, so
//! the result does not depend on the order in which streams are created.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::NodeId;

/// Recorded in run metadata so replays can be cross-checked.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9), key = SplitMix64(master_seed, node, purpose)";

/// Node id used for streams that belong to the scenario rather than a node.
pub const GLOBAL_STREAM: NodeId = NodeId(u32::MAX);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamPurpose {
    Backoff,
    Shadowing,
    Traffic,
    Mobility,
    Selector,
    Placement,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Backoff => 1,
            StreamPurpose::Shadowing => 2,
            StreamPurpose::Traffic => 3,
            StreamPurpose::Mobility => 4,
            StreamPurpose::Selector => 5,
            StreamPurpose::Placement => 6,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    pub master_seed: u64,
    pub node: NodeId,
    pub purpose: StreamPurpose,
    inner: ChaCha8Rng,
}

pub fn derive_stream(master_seed: u64, node: NodeId, purpose: StreamPurpose) -> RngStream {
    let mut state = master_seed;
    let a = splitmix64(&mut state);
    state ^= (u64::from(node.0) << 8) ^ purpose.tag();
    let mut key = [0u8; 32];
    let words = [a, splitmix64(&mut state), splitmix64(&mut state), splitmix64(&mut state)];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    RngStream { master_seed, node, purpose, inner: ChaCha8Rng::from_seed(key) }
}

impl RngStream {
    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn uniform_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        self.inner.random_range(lo..=hi)
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

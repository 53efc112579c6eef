//! Counter-derived random streams.
//!
//! One master seed expands into named streams: the stream name is hashed with
//! FNV-1a, mixed with the seed through SplitMix64 to give a ChaCha key, and the
//! work-item index selects the ChaCha stream. Any shot or sweep point can
//! therefore be regenerated in isolation, and parallel execution cannot change
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Master seed plus the named-stream expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed {
    pub master: u64,
}

impl StreamSeed {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    /// Independent generator for work item `index` of stream `name`.
    pub fn stream(&self, name: &str, index: u64) -> SimRng {
        let tag = fnv1a(name);
        let mut key = [0u8; 32];
        let mut state = self.master ^ tag.rotate_left(17);
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// Child seed for a sub-experiment, e.g. one sweep point.
    pub fn child(&self, name: &str, index: u64) -> StreamSeed {
        StreamSeed::new(splitmix64(self.master ^ fnv1a(name) ^ splitmix64(index)))
    }
}

/// Shorthand used in tests and examples.
pub fn stream(seed: u64, name: &str, index: u64) -> SimRng {
    StreamSeed::new(seed).stream(name, index)
}

//! Named, counter-based random substreams.
//!
//! Every consumer (one parameter's initializer, one dropout layer at one
//! training step, one epoch's shuffle) draws from its own ChaCha stream
//! keyed by `(run seed, name, index)`. Adding a consumer never shifts the
//! numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for substream `(name, index)`.
    pub fn stream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let key = fnv1a(
            name.bytes().chain(index.to_le_bytes()),
            FNV_OFFSET,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        rng
    }
}

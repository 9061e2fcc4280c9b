//! Keyed, hierarchical RNG streams.
//!
//! Every consumer of randomness derives its own stream from a root key and
//! a path of purpose tags, so concurrent consumers never share a stream and
//! any run is reproducible from (root seed, path) alone. Derivation hashes
//! the parent key with the tag, so sibling streams are statistically
//! independent regardless of draw counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A derivable RNG key. Cheap to clone; children are independent streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngKey {
    state: [u8; 32],
}

impl RngKey {
    /// Root key for a run, from the user-facing seed.
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"mucs-rng-root");
        h.update(seed.to_le_bytes());
        RngKey {
            state: h.finalize().into(),
        }
    }

    /// Derive a child key for a named purpose.
    pub fn child(&self, tag: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0x1f]);
        h.update(tag.as_bytes());
        RngKey {
            state: h.finalize().into(),
        }
    }

    /// Derive an indexed child key (e.g. per repeat, per item).
    pub fn child_idx(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0x2f]);
        h.update(index.to_le_bytes());
        RngKey {
            state: h.finalize().into(),
        }
    }

    /// Materialize the stream for this key.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.state)
    }

    /// A stable u64 view of the key, used where an integer seed is stored
    /// (e.g. generation seeds in artifacts).
    pub fn as_u64(&self) -> u64 {
        u64::from_le_bytes(self.state[..8].try_into().expect("key is 32 bytes"))
    }

    /// Hex digest of the key for provenance records.
    pub fn hex(&self) -> String {
        hex::encode(self.state)
    }
}

/// Stream derived directly from a stored integer seed (generation seeds u).
pub fn rng_from_u64(seed: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(b"mucs-rng-u64");
    h.update(seed.to_le_bytes());
    ChaCha12Rng::from_seed(h.finalize().into())
}

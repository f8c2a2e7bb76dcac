//! Seedable, splittable random streams.
//!
//! Every consumer of randomness asks a [`SeedStream`] for a named substream
//! keyed by integer indices (round, prompt, ...). Substreams are derived by
//! hashing, so the draws a prompt sees never depend on how many draws other
//! prompts made or on the order in which workers ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The concrete generator handed out by [`SeedStream`].
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A child stream, independent of the parent's other substreams.
    pub fn child(&self, label: &str) -> SeedStream {
        SeedStream::new(self.derive(label, &[]))
    }

    /// Stable 64-bit key for `(seed, label, indices)`.
    pub fn derive(&self, label: &str, indices: &[u64]) -> u64 {
        self.derive_with(label, indices, &[])
    }

    /// Like [`derive`](Self::derive) with extra byte strings mixed in.
    pub fn derive_with(&self, label: &str, indices: &[u64], extra: &[&[u8]]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        for i in indices {
            h.update(i.to_le_bytes());
        }
        for e in extra {
            h.update((e.len() as u64).to_le_bytes());
            h.update(e);
        }
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(out)
    }

    pub fn rng(&self, label: &str, indices: &[u64]) -> StreamRng {
        StreamRng::seed_from_u64(self.derive(label, indices))
    }
}

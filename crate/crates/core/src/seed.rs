//! Deterministic derivation of independent random streams.
//!
//! Every random decision in the system draws from a stream keyed by a global
//! seed plus a purpose tag and whatever identifies the decision (image id,
//! round, coordinates). Keys are hashed with SHA-256, so streams do not depend
//! on iteration order and stay stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Builder for a stream key.
#[derive(Clone)]
pub struct Stream {
    hasher: Sha256,
}

impl Stream {
    pub fn new(seed: u64, tag: &str) -> Self {
        let mut s = Self { hasher: Sha256::new() };
        s.hasher.update(seed.to_le_bytes());
        s.str(tag)
    }

    pub fn str(mut self, part: &str) -> Self {
        self.hasher.update((part.len() as u64).to_le_bytes());
        self.hasher.update(part.as_bytes());
        self
    }

    pub fn u64(mut self, part: u64) -> Self {
        self.hasher.update(part.to_le_bytes());
        self
    }

    pub fn seed(self) -> u64 {
        let digest = self.hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn rng(self) -> ChaCha8Rng {
        let digest = self.hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(key)
    }
}

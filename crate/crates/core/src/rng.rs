//! Named random streams.
//!
//! Every source of randomness in the harness is addressed by a path of labels
//! under a root seed, e.g. `(42, "dataset", "A", "train", 17)`. The path is
//! hashed with a length-prefixed encoding, so distinct paths never share an
//! encoding and changing one split's size cannot shift another split's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::{self, Display};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    path: Vec<String>,
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey {
            seed,
            path: Vec::new(),
        }
    }

    pub fn child(&self, label: impl Display) -> Self {
        let mut path = self.path.clone();
        path.push(label.to_string());
        StreamKey {
            seed: self.seed,
            path,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"proxygap-stream");
        hasher.update(self.seed.to_le_bytes());
        for label in &self.path {
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
        }
        let out = hasher.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        bytes
    }

    /// 64-bit seed derived from the full path.
    pub fn derive_seed(&self) -> u64 {
        let d = self.digest();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::from_seed(self.digest())
    }
}

impl Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.seed)?;
        for label in &self.path {
            write!(f, "/{label}")?;
        }
        Ok(())
    }
}

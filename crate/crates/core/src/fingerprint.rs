//! Content hashes used to tie artifacts to their inputs.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental SHA-256 over a sequence of byte chunks.
#[derive(Default, Clone)]
pub struct Fingerprinter(Sha256);

impl Fingerprinter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Length-prefixed so that chunk boundaries are part of the hash.
    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Version string embedded in every artifact.
pub fn code_version() -> &'static str {
    concat!("vscc-", env!("CARGO_PKG_VERSION"))
}

//! SHA-256 content digests.

use std::fmt;
use std::io;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of hex characters of a digest used in store path names.
pub const DIGEST_PREFIX_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid content hash {0:?}: expected 64 lowercase hex characters")]
pub struct ParseHashError(pub String);

/// A SHA-256 digest, always rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn of(data: &[u8]) -> Self {
        Self(Sha256::digest(data).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// The first 32 hex characters, used as the store path prefix.
    pub fn digest_prefix(&self) -> String {
        hex::encode(&self.0[..DIGEST_PREFIX_LEN / 2])
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = ParseHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ParseHashError(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| ParseHashError(s.to_string()))?;
        Ok(Self(out))
    }
}

/// Streaming hasher that also counts the bytes it has seen.
#[derive(Default)]
pub struct HashingWriter {
    hasher: Sha256,
    len: u64,
}

impl HashingWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> (ContentHash, u64) {
        (ContentHash(self.hasher.finalize().into()), self.len)
    }
}

impl io::Write for HashingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.hasher.update(buf);
        self.len += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

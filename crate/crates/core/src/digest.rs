//! Content digests over a length-prefixed canonical encoding.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Lower-case hex SHA-256.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(String);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Parses a 64-character hex string.
    pub fn parse(s: &str) -> Option<Self> {
        let ok = s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        ok.then(|| Digest(s.to_string()))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.0[..12.min(self.0.len())])
    }
}

/// Streams typed fields into SHA-256. Every variable-length value is
/// preceded by its byte length, so no two field sequences share an encoding.
pub struct CanonicalHasher {
    inner: Sha256,
}

impl CanonicalHasher {
    /// `domain` separates digests of different record kinds.
    pub fn new(domain: &str) -> Self {
        let mut h = CanonicalHasher { inner: Sha256::new() };
        h.str(domain);
        h
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.inner.update((b.len() as u64).to_le_bytes());
        self.inner.update(b);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        // -0.0 and 0.0 compare equal and must hash equal.
        let v = if v == 0.0 { 0.0 } else { v };
        self.inner.update(v.to_bits().to_le_bytes());
        self
    }

    pub fn opt_i64(&mut self, v: Option<i64>) -> &mut Self {
        match v {
            None => self.inner.update([0u8]),
            Some(x) => {
                self.inner.update([1u8]);
                self.inner.update(x.to_le_bytes());
            }
        }
        self
    }

    pub fn finish(self) -> Digest {
        Digest(hex::encode(self.inner.finalize()))
    }
}

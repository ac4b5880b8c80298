//! Byte stores behind a single contract.
//!
//! Every backend serves immutable objects addressed by an [`ObjectKey`] and
//! supports inclusive byte-range reads, which is what the shard format relies
//! on for random access. Wrappers add injected latency ([`LatencyBackend`])
//! and an LRU read cache ([`CachedBackend`]); [`ObjectServer`] exposes any
//! backend over a small S3-style HTTP protocol that [`HttpBackend`] speaks.

mod cache;
mod http;
mod latency;
mod local;
mod memory;
mod server;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use cache::{CacheConfig, CachedBackend};
pub use http::{HttpBackend, ENDPOINT_ENV};
pub use latency::{LatencyBackend, LatencyDistribution, LatencyModel, LatencySampler};
pub use local::LocalBackend;
pub use memory::MemoryBackend;
pub use server::{ObjectServer, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("range {range} not satisfiable for object {key} of {len} bytes")]
    RangeNotSatisfiable {
        key: String,
        range: ByteRange,
        len: u64,
    },
    #[error("invalid object key {0:?}")]
    InvalidKey(String),
    #[error("invalid byte range: {0}")]
    InvalidRange(String),
    #[error("write denied for {0}")]
    WriteDenied(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid latency model: {0}")]
    InvalidLatency(String),
    #[error("invalid cache config: {0}")]
    InvalidCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StorageError> = std::result::Result<T, E>;

/// A non-empty, relative, slash-separated object name without `..` segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectKey(String);

impl ObjectKey {
    pub fn new(key: impl Into<String>) -> Result<Self> {
        let key = key.into();
        let valid = !key.is_empty()
            && !key.starts_with('/')
            && !key.contains('\\')
            && !key.contains('\0')
            && key.split('/').all(|seg| !seg.is_empty() && seg != "..");
        if valid {
            Ok(Self(key))
        } else {
            Err(StorageError::InvalidKey(key))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ObjectKey {
    type Error = StorageError;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ObjectKey> for String {
    fn from(key: ObjectKey) -> Self {
        key.0
    }
}

impl TryFrom<&str> for ObjectKey {
    type Error = StorageError;

    fn try_from(value: &str) -> Result<Self> {
        Self::new(value)
    }
}

/// Inclusive byte range; `end: None` reads to the end of the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ByteRange {
    pub start: u64,
    pub end: Option<u64>,
}

impl ByteRange {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start > end {
            return Err(StorageError::InvalidRange(format!("{start}-{end}")));
        }
        Ok(Self {
            start,
            end: Some(end),
        })
    }

    pub fn from_offset(start: u64) -> Self {
        Self { start, end: None }
    }

    /// Range covering `len` bytes starting at `offset`. `len` must be non-zero.
    pub fn with_len(offset: u64, len: u64) -> Result<Self> {
        if len == 0 {
            return Err(StorageError::InvalidRange(format!(
                "empty range at {offset}"
            )));
        }
        Self::new(offset, offset + len - 1)
    }

    /// Resolves against an object of `len` bytes into a half-open `start..end`.
    ///
    /// Ranges reaching past the object are rejected rather than clamped, so
    /// every backend reports the same error for the same request.
    pub fn resolve(&self, key: &ObjectKey, len: u64) -> Result<std::ops::Range<u64>> {
        let end = self.end.unwrap_or(len.saturating_sub(1));
        if self.start >= len || end >= len {
            return Err(StorageError::RangeNotSatisfiable {
                key: key.to_string(),
                range: *self,
                len,
            });
        }
        Ok(self.start..end + 1)
    }

    /// `bytes=a-b` / `bytes=a-` header value.
    pub fn to_header(&self) -> String {
        match self.end {
            Some(end) => format!("bytes={}-{}", self.start, end),
            None => format!("bytes={}-", self.start),
        }
    }
}

impl fmt::Display for ByteRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.end {
            Some(end) => write!(f, "[{}, {}]", self.start, end),
            None => write!(f, "[{}, end]", self.start),
        }
    }
}

/// Monotone request counters. `hits + misses == requests` holds for cached
/// backends; plain backends only count requests and bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub requests: u64,
    pub bytes_read: u64,
}

#[derive(Debug, Default)]
pub(crate) struct Counters {
    requests: AtomicU64,
    bytes_read: AtomicU64,
}

impl Counters {
    pub(crate) fn record_read(&self, bytes: usize) {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.bytes_read.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub(crate) fn record_request(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> StorageStats {
        StorageStats {
            requests: self.requests.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            ..StorageStats::default()
        }
    }
}

/// The backend contract shared by local, in-memory and remote stores.
///
/// Implementations must be usable from many worker threads at once.
pub trait StorageBackend: Send + Sync {
    /// Whole object, or the inclusive `range` of it.
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>>;

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()>;

    /// Every key starting with `prefix`, sorted lexicographically.
    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>>;

    /// Object size in bytes.
    fn head(&self, key: &ObjectKey) -> Result<u64>;

    fn stats(&self) -> StorageStats {
        StorageStats::default()
    }

    /// Short label used in result tables.
    fn describe(&self) -> String;
}

impl<B: StorageBackend + ?Sized> StorageBackend for std::sync::Arc<B> {
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        (**self).get(key, range)
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()> {
        (**self).put(key, data)
    }

    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>> {
        (**self).list(prefix)
    }

    fn head(&self, key: &ObjectKey) -> Result<u64> {
        (**self).head(key)
    }

    fn stats(&self) -> StorageStats {
        (**self).stats()
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_validation() {
        assert!(ObjectKey::new("train/shard0.dlbs").is_ok());
        assert!(ObjectKey::new("a").is_ok());
        for bad in ["", "/abs", "a/../b", "..", "a//b", "a/", "a\\b"] {
            assert!(ObjectKey::new(bad).is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn range_resolution() {
        let key = ObjectKey::new("k").unwrap();
        assert_eq!(
            ByteRange::new(0, 9).unwrap().resolve(&key, 10).unwrap(),
            0..10
        );
        assert_eq!(
            ByteRange::new(3, 5).unwrap().resolve(&key, 10).unwrap(),
            3..6
        );
        assert_eq!(ByteRange::from_offset(4).resolve(&key, 10).unwrap(), 4..10);
        assert!(ByteRange::new(3, 10).unwrap().resolve(&key, 10).is_err());
        assert!(ByteRange::from_offset(10).resolve(&key, 10).is_err());
        assert!(ByteRange::from_offset(0).resolve(&key, 0).is_err());
        assert!(ByteRange::new(5, 3).is_err());
        assert!(ByteRange::with_len(0, 0).is_err());
        assert_eq!(
            ByteRange::with_len(4, 2).unwrap(),
            ByteRange::new(4, 5).unwrap()
        );
    }

    #[test]
    fn key_serde_validates() {
        let ok: ObjectKey = serde_json::from_str("\"a/b\"").unwrap();
        assert_eq!(ok.as_str(), "a/b");
        assert!(serde_json::from_str::<ObjectKey>("\"../x\"").is_err());
    }
}

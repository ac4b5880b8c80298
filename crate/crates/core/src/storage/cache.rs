use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ByteRange, ObjectKey, Result, StorageBackend, StorageError, StorageStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
}

type CacheKey = (ObjectKey, Option<ByteRange>);

#[derive(Debug)]
struct Entry {
    data: Arc<Vec<u8>>,
    tick: u64,
}

#[derive(Debug, Default)]
struct LruState {
    entries: HashMap<CacheKey, Entry>,
    // tick -> key; the smallest tick is the least recently used entry.
    recency: BTreeMap<u64, CacheKey>,
    used_bytes: u64,
    next_tick: u64,
}

impl LruState {
    fn touch(&mut self, key: &CacheKey) -> Option<Arc<Vec<u8>>> {
        let tick = self.next_tick;
        let entry = self.entries.get_mut(key)?;
        self.recency.remove(&entry.tick);
        entry.tick = tick;
        self.recency.insert(tick, key.clone());
        self.next_tick += 1;
        Some(Arc::clone(&entry.data))
    }

    /// Inserts as most recently used, evicting from the cold end until the
    /// entry fits. Returns the number of evictions.
    fn insert(&mut self, key: CacheKey, data: Arc<Vec<u8>>, capacity: u64) -> u64 {
        let size = data.len() as u64;
        if size > capacity {
            return 0;
        }
        if self.touch(&key).is_some() {
            return 0;
        }
        let mut evicted = 0;
        while self.used_bytes + size > capacity {
            let (_, cold) = self.recency.pop_first().expect("used bytes imply entries");
            let old = self
                .entries
                .remove(&cold)
                .expect("recency and entries agree");
            self.used_bytes -= old.data.len() as u64;
            evicted += 1;
        }
        let tick = self.next_tick;
        self.next_tick += 1;
        self.recency.insert(tick, key.clone());
        self.entries.insert(key, Entry { data, tick });
        self.used_bytes += size;
        evicted
    }

    fn invalidate(&mut self, key: &ObjectKey) {
        let stale: Vec<CacheKey> = self
            .entries
            .keys()
            .filter(|(k, _)| k == key)
            .cloned()
            .collect();
        for k in stale {
            if let Some(e) = self.entries.remove(&k) {
                self.recency.remove(&e.tick);
                self.used_bytes -= e.data.len() as u64;
            }
        }
    }
}

/// Byte-capacity LRU read cache over any backend.
///
/// Entries are keyed by `(object key, range)`; overlapping ranges of the same
/// object are cached independently. An entry larger than the whole capacity
/// is served but never stored. Metadata updates are serialized; payloads are
/// shared and copied out of the lock.
#[derive(Debug)]
pub struct CachedBackend<B> {
    inner: B,
    capacity: u64,
    state: Mutex<LruState>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    bytes_read: AtomicU64,
}

impl<B: StorageBackend> CachedBackend<B> {
    pub fn new(inner: B, config: CacheConfig) -> Result<Self> {
        if config.capacity_bytes == 0 {
            return Err(StorageError::InvalidCache(
                "capacity_bytes must be positive".into(),
            ));
        }
        Ok(Self {
            inner,
            capacity: config.capacity_bytes,
            state: Mutex::new(LruState::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            bytes_read: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cached_bytes(&self) -> u64 {
        self.state.lock().expect("lock poisoned").used_bytes
    }

    pub fn cached_get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        let cache_key = (key.clone(), range);
        let hit = self.state.lock().expect("lock poisoned").touch(&cache_key);
        let data = match hit {
            Some(data) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                data
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                let data = Arc::new(self.inner.get(key, range)?);
                let evicted = self.state.lock().expect("lock poisoned").insert(
                    cache_key,
                    Arc::clone(&data),
                    self.capacity,
                );
                self.evictions.fetch_add(evicted, Ordering::Relaxed);
                data
            }
        };
        self.bytes_read
            .fetch_add(data.len() as u64, Ordering::Relaxed);
        Ok(data.as_ref().clone())
    }
}

impl<B: StorageBackend> StorageBackend for CachedBackend<B> {
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        self.cached_get(key, range)
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()> {
        self.inner.put(key, data)?;
        self.state.lock().expect("lock poisoned").invalidate(key);
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>> {
        self.inner.list(prefix)
    }

    fn head(&self, key: &ObjectKey) -> Result<u64> {
        self.inner.head(key)
    }

    fn stats(&self) -> StorageStats {
        let hits = self.hits.load(Ordering::Relaxed);
        let misses = self.misses.load(Ordering::Relaxed);
        StorageStats {
            hits,
            misses,
            evictions: self.evictions.load(Ordering::Relaxed),
            requests: hits + misses,
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
        }
    }

    fn describe(&self) -> String {
        format!("{}+lru({}B)", self.inner.describe(), self.capacity)
    }
}

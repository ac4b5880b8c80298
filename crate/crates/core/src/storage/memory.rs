use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use super::{
    ByteRange, Counters, LocalBackend, ObjectKey, Result, StorageBackend, StorageError,
    StorageStats,
};

/// Objects held in process memory.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    objects: RwLock<BTreeMap<ObjectKey, Arc<Vec<u8>>>>,
    counters: Counters,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copies every object of `source` into memory.
    pub fn load_from(source: &dyn StorageBackend) -> Result<Self> {
        let store = Self::new();
        {
            let mut objects = store.objects.write().expect("lock poisoned");
            for key in source.list("")? {
                let data = source.get(&key, None)?;
                objects.insert(key, Arc::new(data));
            }
        }
        Ok(store)
    }

    /// Loads a directory tree laid out as a [`LocalBackend`].
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_from(&LocalBackend::new(dir.as_ref())?)
    }

    pub fn total_bytes(&self) -> u64 {
        let objects = self.objects.read().expect("lock poisoned");
        objects.values().map(|v| v.len() as u64).sum()
    }
}

impl StorageBackend for MemoryBackend {
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        let data = {
            let objects = self.objects.read().expect("lock poisoned");
            objects
                .get(key)
                .cloned()
                .ok_or_else(|| StorageError::NotFound(key.to_string()))?
        };
        let out = match range {
            Some(r) => {
                let span = r.resolve(key, data.len() as u64)?;
                data[span.start as usize..span.end as usize].to_vec()
            }
            None => data.as_ref().clone(),
        };
        self.counters.record_read(out.len());
        Ok(out)
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()> {
        self.counters.record_request();
        let mut objects = self.objects.write().expect("lock poisoned");
        objects.insert(key.clone(), Arc::new(data.to_vec()));
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>> {
        self.counters.record_request();
        let objects = self.objects.read().expect("lock poisoned");
        Ok(objects
            .keys()
            .filter(|k| k.as_str().starts_with(prefix))
            .cloned()
            .collect())
    }

    fn head(&self, key: &ObjectKey) -> Result<u64> {
        self.counters.record_request();
        let objects = self.objects.read().expect("lock poisoned");
        objects
            .get(key)
            .map(|v| v.len() as u64)
            .ok_or_else(|| StorageError::NotFound(key.to_string()))
    }

    fn stats(&self) -> StorageStats {
        self.counters.snapshot()
    }

    fn describe(&self) -> String {
        "memory".into()
    }
}

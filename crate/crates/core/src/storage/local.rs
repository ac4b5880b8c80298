use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{ByteRange, Counters, ObjectKey, Result, StorageBackend, StorageError, StorageStats};

/// Objects stored as files under a root directory; keys map to relative paths.
#[derive(Debug)]
pub struct LocalBackend {
    root: PathBuf,
    counters: Counters,
}

impl LocalBackend {
    /// Opens `root`, creating it if missing.
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            counters: Counters::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: &ObjectKey) -> PathBuf {
        self.root.join(key.as_str())
    }
}

fn not_found(key: &ObjectKey, err: io::Error) -> StorageError {
    if err.kind() == io::ErrorKind::NotFound {
        StorageError::NotFound(key.to_string())
    } else {
        StorageError::Io(err)
    }
}

impl StorageBackend for LocalBackend {
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        let path = self.path_of(key);
        let mut file = File::open(&path).map_err(|e| not_found(key, e))?;
        let len = file.metadata()?.len();
        if !file.metadata()?.is_file() {
            return Err(StorageError::NotFound(key.to_string()));
        }
        let span = match range {
            Some(r) => r.resolve(key, len)?,
            None => 0..len,
        };
        let mut buf = vec![0u8; (span.end - span.start) as usize];
        file.seek(SeekFrom::Start(span.start))?;
        file.read_exact(&mut buf)?;
        self.counters.record_read(buf.len());
        Ok(buf)
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()> {
        self.counters.record_request();
        let path = self.path_of(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|_| StorageError::WriteDenied(key.to_string()))?;
        }
        // Write-then-rename so concurrent readers never observe a partial object.
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_data()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| match e.kind() {
            io::ErrorKind::PermissionDenied => StorageError::WriteDenied(key.to_string()),
            _ => StorageError::Io(e),
        })
    }

    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>> {
        self.counters.record_request();
        let mut keys = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                if entry.file_type()?.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&self.root).expect("walked under root");
                let rel = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                if rel.starts_with(prefix) {
                    if let Ok(key) = ObjectKey::new(rel) {
                        keys.push(key);
                    }
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn head(&self, key: &ObjectKey) -> Result<u64> {
        self.counters.record_request();
        let meta = fs::metadata(self.path_of(key)).map_err(|e| not_found(key, e))?;
        if !meta.is_file() {
            return Err(StorageError::NotFound(key.to_string()));
        }
        Ok(meta.len())
    }

    fn stats(&self) -> StorageStats {
        self.counters.snapshot()
    }

    fn describe(&self) -> String {
        "local".into()
    }
}

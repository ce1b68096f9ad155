//! Content-addressed response cache: one record file per (request, sample)
//! key, sharded by digest prefix. Writes go through a temp file and rename,
//! so concurrent readers never observe a partial record; corrupted records
//! are treated as misses and rewritten.

use super::ModelIoError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model_id: String,
    completion: String,
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into(), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_path(&self, key: &str) -> PathBuf {
        let shard = &key[..2.min(key.len())];
        self.root.join(shard).join(format!("{key}.json"))
    }

    /// Looks up one completion. Unreadable or mismatched records count as
    /// misses.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = self.record_path(key);
        let bytes = std::fs::read(&path).ok()?;
        let record: CacheRecord = serde_json::from_slice(&bytes).ok()?;
        if record.key != key {
            return None;
        }
        Some(record.completion)
    }

    pub fn put(&self, key: &str, model_id: &str, completion: &str) -> Result<(), ModelIoError> {
        let path = self.record_path(key);
        let dir = path.parent().expect("record path has parent");
        std::fs::create_dir_all(dir).map_err(|e| ModelIoError::Cache(e.to_string()))?;
        let record = CacheRecord {
            key: key.to_string(),
            model_id: model_id.to_string(),
            completion: completion.to_string(),
        };
        let payload =
            serde_json::to_vec(&record).map_err(|e| ModelIoError::Cache(e.to_string()))?;
        // Unique temp name per call: identical keys may be written
        // concurrently by racing workers.
        static WRITE_SEQ: AtomicU64 = AtomicU64::new(0);
        let seq = WRITE_SEQ.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{}.tmp.{}.{}", key, std::process::id(), seq));
        std::fs::write(&tmp, &payload).map_err(|e| ModelIoError::Cache(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| ModelIoError::Cache(e.to_string()))?;
        Ok(())
    }

    pub(super) fn record_hit(&self) {
        self.hits.fetch_add(1, Ordering::Relaxed);
    }

    pub(super) fn record_miss(&self) {
        self.misses.fetch_add(1, Ordering::Relaxed);
    }

    /// (hits, misses) observed through [`super::cached_chat`].
    pub fn stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }
}

//! Persistent response cache keyed by `(backend_id, image_id, prompt digest)`.
//!
//! The file is JSON lines, appended under a mutex; a torn final line (crash
//! mid-write) is ignored on load. Duplicate keys resolve last-writer-wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, VqaBackend, VqaRequest, VqaResponse};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub backend_id: String,
    pub image_id: String,
    pub prompt_digest: String,
    pub text: String,
    pub latency_ms: u64,
}

type CacheKey = (String, String, String);

pub struct ResponseCache {
    entries: RwLock<HashMap<CacheKey, CacheEntry>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            entries: RwLock::new(HashMap::new()),
            file: None,
            path: None,
        }
    }

    /// Opens (or creates) a cache file and loads its entries.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.insert(key_of(&e.backend_id, &e.image_id, &e.prompt_digest), e);
                    }
                    Err(err) if !line.trim().is_empty() => log::warn!("skipping unreadable cache line: {err}"),
                    Err(_) => {}
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let len = file.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            let mut reader = File::open(path)?;
            reader.seek(SeekFrom::Start(len - 1))?;
            reader.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        Ok(ResponseCache {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, backend_id: &str, request: &VqaRequest) -> Option<CacheEntry> {
        let key = key_of(backend_id, &request.image_id, &request.prompt_digest());
        self.entries.read().expect("cache lock").get(&key).cloned()
    }

    pub fn insert(&self, entry: CacheEntry) -> std::io::Result<()> {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            let mut f = file.lock().expect("cache file lock");
            f.write_all(&line)?;
            f.flush()?;
        }
        let key = key_of(&entry.backend_id, &entry.image_id, &entry.prompt_digest);
        self.entries.write().expect("cache lock").insert(key, entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn key_of(backend_id: &str, image_id: &str, digest: &str) -> CacheKey {
    (backend_id.to_string(), image_id.to_string(), digest.to_string())
}

/// Wraps a backend with the response cache and counts real backend calls.
pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
    calls: AtomicU64,
    hits: AtomicU64,
}

impl<B: VqaBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        CachedBackend {
            inner,
            cache,
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    /// Requests that reached the wrapped backend.
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn is_cached(&self, request: &VqaRequest) -> bool {
        self.cache.get(self.inner.id(), request).is_some()
    }
}

impl<B: VqaBackend> VqaBackend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        if let Some(hit) = self.cache.get(self.inner.id(), request) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(VqaResponse {
                text: hit.text,
                latency: Duration::from_millis(hit.latency_ms),
                backend_id: hit.backend_id,
            });
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.ask(request)?;
        let entry = CacheEntry {
            backend_id: self.inner.id().to_string(),
            image_id: request.image_id.clone(),
            prompt_digest: request.prompt_digest(),
            text: response.text.clone(),
            latency_ms: response.latency.as_millis() as u64,
        };
        if let Err(e) = self.cache.insert(entry) {
            log::warn!("failed to persist cache entry: {e}");
        }
        Ok(response)
    }
}

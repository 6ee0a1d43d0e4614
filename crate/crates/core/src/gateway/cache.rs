//! Content-addressed embedding cache.
//!
//! Layout: `<dir>/<first two hex chars>/<sha256>.vec`. Each file is one JSON
//! header line (`provider_id`, `d`, `checksum`) followed by `d` little-endian
//! f64 values. The checksum is the SHA-256 of that payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector, GatewayError};

const LOCK_STRIPES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    /// The stored entry failed verification and was recomputed.
    Recovered,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    provider_id: String,
    d: usize,
    checksum: String,
}

/// Hex SHA-256 of the key material: provider id, image bytes, description.
pub fn cache_key(provider_id: &str, image: &[u8], description: &str) -> String {
    let mut h = Sha256::new();
    for part in [provider_id.as_bytes(), image, description.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

pub struct EmbeddingCache {
    dir: PathBuf,
    locks: Vec<Mutex<()>>,
    tmp_counter: AtomicU64,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| GatewayError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self {
            dir,
            locks: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.vec"))
    }

    fn stripe(&self, key: &str) -> &Mutex<()> {
        let idx = usize::from_str_radix(&key[..2], 16).unwrap_or(0) % LOCK_STRIPES;
        &self.locks[idx]
    }

    /// Returns the cached vector for the key material, calling `compute` only
    /// on a miss or when the stored entry is corrupt.
    pub fn get_or_compute<F>(
        &self,
        provider_id: &str,
        image: &[u8],
        description: &str,
        compute: F,
    ) -> Result<(EmbeddingVector, CacheStatus), GatewayError>
    where
        F: FnOnce() -> Result<EmbeddingVector, GatewayError>,
    {
        let key = cache_key(provider_id, image, description);
        let path = self.entry_path(&key);
        let _guard = self.stripe(&key).lock().unwrap_or_else(|e| e.into_inner());

        let status = if path.exists() {
            match read_entry(&path, provider_id) {
                Ok(v) => return Ok((v, CacheStatus::Hit)),
                Err(e) => {
                    log::warn!("{e}; recomputing");
                    CacheStatus::Recovered
                }
            }
        } else {
            CacheStatus::Miss
        };

        let vector = compute()?;
        self.write_entry(&path, &vector)?;
        Ok((vector, status))
    }

    fn write_entry(&self, path: &Path, v: &EmbeddingVector) -> Result<(), GatewayError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| GatewayError::Io { path, source }
        };
        let parent = path.parent().expect("entry has a parent");
        fs::create_dir_all(parent).map_err(io(parent))?;
        let payload: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
        let header = Header {
            provider_id: v.provider_id().to_string(),
            d: v.dim(),
            checksum: hex::encode(Sha256::digest(&payload)),
        };
        let tmp = parent.join(format!(
            ".{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
            serde_json::to_writer(&mut f, &header).expect("header serializes");
            f.write_all(b"\n").map_err(io(&tmp))?;
            f.write_all(&payload).map_err(io(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io(path))
    }
}

fn read_entry(path: &Path, provider_id: &str) -> Result<EmbeddingVector, GatewayError> {
    let corrupt = || GatewayError::CacheCorruption(path.to_path_buf());
    let bytes = fs::read(path).map_err(|_| corrupt())?;
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(corrupt)?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|_| corrupt())?;
    let payload = &bytes[split + 1..];
    if header.provider_id != provider_id
        || payload.len() != header.d * 8
        || hex::encode(Sha256::digest(payload)) != header.checksum
    {
        return Err(corrupt());
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingVector::new(values, header.provider_id).map_err(|_| corrupt())
}

/// Wraps a provider so every call goes through an [`EmbeddingCache`].
pub struct CachedEmbeddingProvider {
    inner: Arc<dyn EmbeddingProvider>,
    cache: EmbeddingCache,
    hits: AtomicUsize,
    misses: AtomicUsize,
    recovered: AtomicUsize,
}

impl CachedEmbeddingProvider {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, cache: EmbeddingCache) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            recovered: AtomicUsize::new(0),
        }
    }

    /// (hits, misses, recovered) since construction.
    pub fn stats(&self) -> (usize, usize, usize) {
        (
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
            self.recovered.load(Ordering::Relaxed),
        )
    }
}

impl EmbeddingProvider for CachedEmbeddingProvider {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn embed(&self, image: &[u8], description: &str) -> Result<EmbeddingVector, GatewayError> {
        let (v, status) = self
            .cache
            .get_or_compute(self.inner.provider_id(), image, description, || {
                self.inner.embed(image, description)
            })?;
        let counter = match status {
            CacheStatus::Hit => &self.hits,
            CacheStatus::Miss => &self.misses,
            CacheStatus::Recovered => &self.recovered,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        Ok(v)
    }
}

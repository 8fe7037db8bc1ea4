//! Content-addressed on-disk cache of next-token responses.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::tokenizer::TokenId;

pub const CACHE_DIR_ENV: &str = "LANTREE_CACHE_DIR";

#[derive(Debug, Clone)]
pub struct ProbeCache {
    dir: PathBuf,
}

impl ProbeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache rooted at `$LANTREE_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_DIR_ENV).map(Self::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(model: &str, context: &[TokenId], top_m: usize) -> String {
        let mut h = Sha256::new();
        h.update((model.len() as u64).to_le_bytes());
        h.update(model.as_bytes());
        h.update((context.len() as u64).to_le_bytes());
        for t in context {
            h.update(t.to_le_bytes());
        }
        h.update((top_m as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        fs::read(self.path(key)).ok()
    }

    /// Stores `body` atomically. Failures are logged and otherwise ignored.
    pub fn put(&self, key: &str, body: &[u8]) {
        let path = self.path(key);
        let result = (|| -> std::io::Result<()> {
            fs::create_dir_all(path.parent().expect("keyed path has a parent"))?;
            let mut tmp = tempfile_in(path.parent().unwrap())?;
            tmp.1.write_all(body)?;
            tmp.1.sync_all()?;
            fs::rename(&tmp.0, &path)
        })();
        if let Err(e) = result {
            log::warn!("probe cache write failed for {}: {e}", path.display());
        }
    }

    pub fn remove(&self, key: &str) {
        let _ = fs::remove_file(self.path(key));
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let name = format!(
        ".tmp-{}-{}",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    );
    let p = dir.join(name);
    let f = fs::File::create(&p)?;
    Ok((p, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_separate_every_field() {
        let k = ProbeCache::key("m", &[1, 2], 5);
        assert_ne!(k, ProbeCache::key("m", &[1, 2], 4));
        assert_ne!(k, ProbeCache::key("n", &[1, 2], 5));
        assert_ne!(k, ProbeCache::key("m", &[1], 5));
        assert_eq!(k, ProbeCache::key("m", &[1, 2], 5));
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let c = ProbeCache::new(dir.path());
        let k = ProbeCache::key("m", &[1], 1);
        assert!(c.get(&k).is_none());
        c.put(&k, b"{}");
        assert_eq!(c.get(&k).unwrap(), b"{}");
    }
}

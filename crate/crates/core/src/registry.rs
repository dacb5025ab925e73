//! Content-addressed cache of trained checkpoints.
//!
//! Layout: `<root>/<key digest>/checkpoint.bin` plus `key.json`. A key is
//! trained at most once; concurrent requests for the same key wait for the
//! first trainer, both within a process (per-key mutex) and across
//! processes (`lock` file created exclusively, checkpoint published by
//! rename).

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::ModelConfig;
use crate::optim::{hex, load_checkpoint, save_checkpoint, ModelCheckpoint};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const KEY_FILE: &str = "key.json";
const LOCK_FILE: &str = "lock";
const LOCK_POLL: Duration = Duration::from_millis(200);
const STALE_LOCK_AGE: Duration = Duration::from_secs(6 * 3600);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegistryKey {
    pub partition_id: String,
    pub seed_checkpoint_hash: String,
    pub model_config_hash: String,
    pub budget_tokens: u64,
    pub schedule_hash: String,
    pub stream_seed: u64,
}

/// SHA-256 of the compact JSON encoding of `value`.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex(&Sha256::digest(bytes))
}

pub fn config_hash(config: &ModelConfig) -> String {
    digest_of(config)
}

impl RegistryKey {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("partition_id", &self.partition_id),
            ("seed_checkpoint_hash", &self.seed_checkpoint_hash),
            ("model_config_hash", &self.model_config_hash),
            ("schedule_hash", &self.schedule_hash),
        ] {
            if v.is_empty() {
                return Err(Error::invalid(format!("registry key field {field} is empty")));
            }
        }
        if self.budget_tokens == 0 {
            return Err(Error::invalid("registry key budget_tokens is zero"));
        }
        Ok(())
    }

    /// Field order is fixed by the struct, so equal keys encode identically.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("key serializes")
    }

    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryLedger {
    pub trainings_performed: u64,
    pub cache_hits: u64,
    pub stored_checkpoints: u64,
    pub tokens_trained_total: u64,
}

#[derive(Debug)]
pub struct Registry {
    root: Option<PathBuf>,
    memo: Mutex<HashMap<String, Arc<ModelCheckpoint>>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    ledger: Mutex<RegistryLedger>,
}

impl Registry {
    /// Opens (creating if needed) an on-disk registry.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut stored = 0;
        for entry in std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let entry = entry.map_err(|e| Error::io(&root, e))?;
            if entry.path().join(CHECKPOINT_FILE).is_file() {
                stored += 1;
            }
        }
        let reg = Self::in_memory();
        reg.ledger.lock().unwrap().stored_checkpoints = stored;
        Ok(Registry { root: Some(root), ..reg })
    }

    /// Memoizes within the process only.
    pub fn in_memory() -> Self {
        Registry {
            root: None,
            memo: Mutex::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            ledger: Mutex::new(RegistryLedger::default()),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn entry_dir(&self, key: &RegistryKey) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(key.digest()))
    }

    pub fn checkpoint_path(&self, key: &RegistryKey) -> Option<PathBuf> {
        self.entry_dir(key).map(|d| d.join(CHECKPOINT_FILE))
    }

    pub fn ledger_snapshot(&self) -> RegistryLedger {
        *self.ledger.lock().unwrap()
    }

    /// Returns the stored checkpoint without training, if any.
    pub fn get(&self, key: &RegistryKey) -> Result<Option<Arc<ModelCheckpoint>>> {
        let digest = key.digest();
        if let Some(c) = self.memo.lock().unwrap().get(&digest) {
            return Ok(Some(c.clone()));
        }
        match self.checkpoint_path(key) {
            Some(p) if p.is_file() => Ok(Some(Arc::new(load_checkpoint(&p)?))),
            _ => Ok(None),
        }
    }

    /// Cached checkpoint for `key`, training it with `trainer` on a miss.
    pub fn get_or_train<F>(&self, key: &RegistryKey, trainer: F) -> Result<Arc<ModelCheckpoint>>
    where
        F: FnOnce() -> Result<ModelCheckpoint>,
    {
        key.validate()?;
        let digest = key.digest();
        let key_lock = self.key_locks.lock().unwrap().entry(digest.clone()).or_default().clone();
        let _guard = key_lock.lock().unwrap();

        if let Some(c) = self.memo.lock().unwrap().get(&digest).cloned() {
            self.ledger.lock().unwrap().cache_hits += 1;
            return Ok(c);
        }
        let Some(dir) = self.entry_dir(key) else {
            let ckpt = Arc::new(trainer()?);
            self.record_training(key, true);
            self.memo.lock().unwrap().insert(digest, ckpt.clone());
            return Ok(ckpt);
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(CHECKPOINT_FILE);
        let lock = FileLock::acquire(&dir.join(LOCK_FILE))?;
        let mut existed = false;
        if path.is_file() {
            existed = true;
            match load_checkpoint(&path) {
                Ok(c) => {
                    drop(lock);
                    let c = Arc::new(c);
                    self.ledger.lock().unwrap().cache_hits += 1;
                    self.memo.lock().unwrap().insert(digest, c.clone());
                    return Ok(c);
                }
                Err(e) => {
                    log::warn!("evicting corrupt cache entry {}: {e}", path.display());
                    std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        let ckpt = Arc::new(trainer()?);
        save_checkpoint(&ckpt, &path)?;
        let manifest = serde_json::to_string_pretty(key).expect("key serializes");
        let key_path = dir.join(KEY_FILE);
        std::fs::write(&key_path, manifest + "\n").map_err(|e| Error::io(&key_path, e))?;
        drop(lock);
        self.record_training(key, !existed);
        self.memo.lock().unwrap().insert(digest, ckpt.clone());
        Ok(ckpt)
    }

    fn record_training(&self, key: &RegistryKey, new_entry: bool) {
        let mut l = self.ledger.lock().unwrap();
        l.trainings_performed += 1;
        l.tokens_trained_total += key.budget_tokens;
        if new_entry {
            l.stored_checkpoints += 1;
        }
    }
}

/// Exclusive lock file holding the owner's pid; removed on drop.
struct FileLock {
    path: PathBuf,
}

impl FileLock {
    fn acquire(path: &Path) -> Result<Self> {
        loop {
            match OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(FileLock { path: path.to_path_buf() });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(path) {
                        log::warn!("removing stale lock {}", path.display());
                        let _ = std::fs::remove_file(path);
                    } else {
                        std::thread::sleep(LOCK_POLL);
                    }
                }
                Err(e) => return Err(Error::io(path, e)),
            }
        }
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn lock_is_stale(path: &Path) -> bool {
    let owner = std::fs::read_to_string(path).ok().and_then(|s| s.trim().parse::<u32>().ok());
    if let Some(pid) = owner {
        if pid == std::process::id() {
            return false;
        }
        let proc = Path::new("/proc");
        if proc.is_dir() {
            return !proc.join(pid.to_string()).exists();
        }
    }
    std::fs::metadata(path)
        .and_then(|m| m.modified())
        .map(|t| t.elapsed().unwrap_or_default() > STALE_LOCK_AGE)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(id: &str, stream_seed: u64) -> RegistryKey {
        RegistryKey {
            partition_id: id.into(),
            seed_checkpoint_hash: "seed".into(),
            model_config_hash: "cfg".into(),
            budget_tokens: 100,
            schedule_hash: "sched".into(),
            stream_seed,
        }
    }

    #[test]
    fn canonical_encoding_is_field_ordered() {
        assert_eq!(
            key("a", 1).canonical(),
            r#"{"partition_id":"a","seed_checkpoint_hash":"seed","model_config_hash":"cfg","budget_tokens":100,"schedule_hash":"sched","stream_seed":1}"#
        );
        assert_ne!(key("a", 1).digest(), key("a", 2).digest());
    }

    #[test]
    fn empty_fields_are_rejected() {
        let reg = Registry::in_memory();
        let mut k = key("a", 1);
        k.schedule_hash.clear();
        assert!(reg.get_or_train(&k, || unreachable!()).is_err());
    }

    #[test]
    fn fresh_ledger_is_zero() {
        assert_eq!(Registry::in_memory().ledger_snapshot(), RegistryLedger::default());
    }
}

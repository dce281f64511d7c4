//! Encrypted-at-rest record store.
//!
//! Values are sealed under the key ring's active key before they are kept
//! in memory or written to disk, so the backing file never holds plaintext.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use msag_core::keystore::{KeyError, KeyRing, SealedBlob};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug)]
pub struct SealedStore {
    keys: KeyRing,
    entries: Mutex<BTreeMap<String, SealedBlob>>,
    path: Option<PathBuf>,
}

impl SealedStore {
    pub fn in_memory(keys: KeyRing) -> Self {
        Self {
            keys,
            entries: Mutex::new(BTreeMap::new()),
            path: None,
        }
    }

    /// Loads existing entries from `path` if present; writes go back to it.
    pub fn persistent(keys: KeyRing, path: PathBuf) -> std::io::Result<Self> {
        let entries = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            keys,
            entries: Mutex::new(entries),
            path: Some(path),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, entries: &BTreeMap<String, SealedBlob>) {
        let Some(path) = &self.path else { return };
        let json = serde_json::to_vec(entries).expect("sealed entries serialize");
        if let Err(e) = fs::write(path, json) {
            tracing::warn!(path = %path.display(), error = %e, "sealed store write failed");
        }
    }

    pub fn put<T: Serialize>(&self, id: &str, value: &T) -> Result<(), KeyError> {
        let blob = self.seal(value)?;
        let mut entries = self.entries.lock();
        entries.insert(id.to_owned(), blob);
        self.persist(&entries);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, id: &str) -> Result<Option<T>, KeyError> {
        let blob = self.entries.lock().get(id).cloned();
        blob.map(|b| self.open(&b)).transpose()
    }

    /// Atomic read-modify-write of one entry. The closure sees the current
    /// value (if any) and returns the value to store, or `None` to leave the
    /// entry untouched. Returns the closure's verdict.
    pub fn update<T, R>(
        &self,
        id: &str,
        f: impl FnOnce(Option<T>) -> (Option<T>, R),
    ) -> Result<R, KeyError>
    where
        T: Serialize + DeserializeOwned,
    {
        let mut entries = self.entries.lock();
        let current = entries.get(id).map(|b| self.open(b)).transpose()?;
        let (next, verdict) = f(current);
        if let Some(next) = next {
            entries.insert(id.to_owned(), self.seal(&next)?);
            self.persist(&entries);
        }
        Ok(verdict)
    }

    pub fn remove_where(&self, mut pred: impl FnMut(&str) -> bool) -> usize {
        let mut entries = self.entries.lock();
        let before = entries.len();
        entries.retain(|k, _| !pred(k));
        let removed = before - entries.len();
        if removed > 0 {
            self.persist(&entries);
        }
        removed
    }

    fn seal<T: Serialize>(&self, value: &T) -> Result<SealedBlob, KeyError> {
        let bytes = serde_json::to_vec(value).expect("record serializes");
        self.keys.snapshot().seal(&bytes)
    }

    fn open<T: DeserializeOwned>(&self, blob: &SealedBlob) -> Result<T, KeyError> {
        let bytes = self.keys.snapshot().unseal(blob)?;
        serde_json::from_slice(&bytes).map_err(|_| KeyError::AuthFailure)
    }
}

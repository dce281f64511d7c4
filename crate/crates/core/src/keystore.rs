//! Signing-key lifecycle, rotation and at-rest encryption.
//!
//! A [`KeySet`] is an immutable value. [`KeySet::rotate`] returns a new set;
//! owners publish it through a [`KeyRing`] so readers always see a complete
//! snapshot.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroize;

use crate::crypto::{self, NONCE_LEN};

pub const DEFAULT_ROTATION_PERIOD: i64 = 3 * 24 * 60 * 60;

const SIGN_LABEL: &str = "sign";
const SEAL_LABEL: &str = "seal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyState {
    Active,
    Retiring,
    Retired,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SigningKey {
    pub kid: String,
    #[serde(with = "secret_b64")]
    pub secret: [u8; 32],
    pub created_at: i64,
    pub state: KeyState,
    /// When the key left the active state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demoted_at: Option<i64>,
}

impl SigningKey {
    /// Fresh active key `k-<counter>` with 32 random secret bytes.
    pub fn generate(counter: u64, created_at: i64) -> Self {
        Self {
            kid: format!("k-{counter}"),
            secret: crypto::random_bytes::<32>(),
            created_at,
            state: KeyState::Active,
            demoted_at: None,
        }
    }

    pub fn counter(&self) -> Option<u64> {
        self.kid.strip_prefix("k-")?.parse().ok()
    }

    pub fn mac_key(&self) -> [u8; 32] {
        crypto::derive_subkey(&self.secret, SIGN_LABEL)
    }

    pub fn seal_key(&self) -> [u8; 32] {
        crypto::derive_subkey(&self.secret, SEAL_LABEL)
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("kid", &self.kid)
            .field("secret", &"<redacted>")
            .field("created_at", &self.created_at)
            .field("state", &self.state)
            .field("demoted_at", &self.demoted_at)
            .finish()
    }
}

impl Drop for SigningKey {
    fn drop(&mut self) {
        self.secret.zeroize();
    }
}

mod secret_b64 {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(secret: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(secret))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| D::Error::custom("key secret must be 32 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeySetConfig {
    /// Seconds an active key signs before it is replaced.
    pub rotation_period: i64,
    /// Seconds a demoted key keeps verifying. Must cover the longest token
    /// lifetime issued under any key.
    pub retire_lag: i64,
}

impl Default for KeySetConfig {
    fn default() -> Self {
        Self {
            rotation_period: DEFAULT_ROTATION_PERIOD,
            retire_lag: DEFAULT_ROTATION_PERIOD,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("no active key")]
    NoActiveKey,
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("authentication tag did not verify")]
    AuthFailure,
    #[error("key set must hold exactly one active key, found {0}")]
    ActiveCount(usize),
    #[error("duplicate key id {0}")]
    DuplicateKid(String),
    #[error("retire_lag {retire_lag}s is shorter than the longest token lifetime {lifetime}s")]
    RetireLagTooShort { retire_lag: i64, lifetime: i64 },
    #[error("key file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySet {
    keys: BTreeMap<String, SigningKey>,
    config: KeySetConfig,
}

impl KeySet {
    /// New set with a single active key `k-1`.
    pub fn generate(now: i64, config: KeySetConfig) -> Self {
        let key = SigningKey::generate(1, now);
        Self {
            keys: BTreeMap::from([(key.kid.clone(), key)]),
            config,
        }
    }

    pub fn from_keys(keys: Vec<SigningKey>, config: KeySetConfig) -> Result<Self, KeyError> {
        let mut map = BTreeMap::new();
        for key in keys {
            if map.contains_key(&key.kid) {
                return Err(KeyError::DuplicateKid(key.kid.clone()));
            }
            map.insert(key.kid.clone(), key);
        }
        let active = map.values().filter(|k| k.state == KeyState::Active).count();
        if active != 1 {
            return Err(KeyError::ActiveCount(active));
        }
        Ok(Self { keys: map, config })
    }

    pub fn config(&self) -> KeySetConfig {
        self.config
    }

    pub fn with_config(mut self, config: KeySetConfig) -> Self {
        self.config = config;
        self
    }

    /// Rejects configurations under which a still-valid token could lose its
    /// verification key.
    pub fn check_lifetime(&self, max_token_lifetime: i64) -> Result<(), KeyError> {
        if self.config.retire_lag < max_token_lifetime {
            return Err(KeyError::RetireLagTooShort {
                retire_lag: self.config.retire_lag,
                lifetime: max_token_lifetime,
            });
        }
        Ok(())
    }

    pub fn get(&self, kid: &str) -> Option<&SigningKey> {
        self.keys.get(kid)
    }

    pub fn keys(&self) -> impl Iterator<Item = &SigningKey> {
        // BTreeMap order is lexicographic; present keys by counter.
        let mut v: Vec<&SigningKey> = self.keys.values().collect();
        v.sort_by_key(|k| (k.counter().unwrap_or(u64::MAX), k.kid.clone()));
        v.into_iter()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn active(&self) -> &SigningKey {
        self.try_active().expect("key set invariant: one active key")
    }

    pub fn try_active(&self) -> Option<&SigningKey> {
        self.keys.values().find(|k| k.state == KeyState::Active)
    }

    fn next_counter(&self) -> u64 {
        self.keys.values().filter_map(SigningKey::counter).max().unwrap_or(0) + 1
    }

    /// Applies the rotation schedule at `now`.
    ///
    /// Replaces the active key once it is `rotation_period` old, demoting it
    /// to retiring, and retires keys that have been retiring for longer than
    /// `retire_lag`. Returns an identical set when nothing is due.
    pub fn rotate(&self, now: i64) -> KeySet {
        let mut next = self.clone();
        for key in next.keys.values_mut() {
            if key.state == KeyState::Retiring {
                let since = key.demoted_at.unwrap_or(key.created_at);
                if now - since > self.config.retire_lag {
                    key.state = KeyState::Retired;
                }
            }
        }
        let due = match next.try_active() {
            Some(active) => now - active.created_at >= self.config.rotation_period,
            None => true,
        };
        if due {
            next.force_rotate_in_place(now);
        }
        next
    }

    /// Replaces the active key regardless of its age.
    pub fn force_rotate(&self, now: i64) -> KeySet {
        let mut next = self.clone();
        next.force_rotate_in_place(now);
        next
    }

    fn force_rotate_in_place(&mut self, now: i64) {
        let counter = self.next_counter();
        for key in self.keys.values_mut() {
            if key.state == KeyState::Active {
                key.state = KeyState::Retiring;
                key.demoted_at = Some(now);
            }
        }
        let key = SigningKey::generate(counter, now);
        self.keys.insert(key.kid.clone(), key);
    }

    /// Encrypts under the active key's seal subkey with a fresh nonce. The kid
    /// is bound as associated data.
    pub fn seal(&self, plaintext: &[u8]) -> Result<SealedBlob, KeyError> {
        let key = self.try_active().ok_or(KeyError::NoActiveKey)?;
        let nonce = crypto::random_bytes::<NONCE_LEN>();
        let ciphertext =
            crypto::aes256gcm_encrypt(&key.seal_key(), &nonce, key.kid.as_bytes(), plaintext);
        Ok(SealedBlob {
            nonce,
            ciphertext,
            kid: key.kid.clone(),
        })
    }

    /// Decrypts with any key still present, retired ones included.
    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, KeyError> {
        let key = self
            .get(&blob.kid)
            .ok_or_else(|| KeyError::UnknownKey(blob.kid.clone()))?;
        crypto::aes256gcm_decrypt(&key.seal_key(), &blob.nonce, blob.kid.as_bytes(), &blob.ciphertext)
            .ok_or(KeyError::AuthFailure)
    }

    pub fn to_keys(&self) -> Vec<SigningKey> {
        self.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    #[serde(with = "nonce_b64")]
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext with the 16-byte tag appended.
    #[serde(with = "bytes_b64")]
    pub ciphertext: Vec<u8>,
    pub kid: String,
}

mod nonce_b64 {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(n: &[u8; NONCE_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(n))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; NONCE_LEN], D::Error> {
        let bytes = STANDARD
            .decode(String::deserialize(d)?)
            .map_err(D::Error::custom)?;
        bytes.try_into().map_err(|_| D::Error::custom("nonce must be 12 bytes"))
    }
}

mod bytes_b64 {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD
            .decode(String::deserialize(d)?)
            .map_err(D::Error::custom)
    }
}

/// Shared, atomically swappable key set.
#[derive(Debug, Clone)]
pub struct KeyRing {
    current: Arc<RwLock<Arc<KeySet>>>,
}

impl KeyRing {
    pub fn new(keys: KeySet) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(keys))),
        }
    }

    pub fn snapshot(&self) -> Arc<KeySet> {
        self.current.read().clone()
    }

    pub fn install(&self, keys: KeySet) {
        *self.current.write() = Arc::new(keys);
    }

    /// Runs the rotation schedule; returns true when the set changed.
    pub fn rotate(&self, now: i64) -> bool {
        let mut guard = self.current.write();
        let next = guard.rotate(now);
        let changed = next != **guard;
        if changed {
            *guard = Arc::new(next);
        }
        changed
    }
}

/// Shortest accepted key-file wrapping secret.
pub const MIN_KEYFILE_SECRET: usize = 32;
const KEYFILE_LABEL: &str = "keyfile-v1";

/// On-disk form of a key file: the JSON key list under AES-256-GCM.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyFileEnvelope {
    v: u32,
    nonce: String,
    ciphertext: String,
}

fn keyfile_key(wrap: &[u8]) -> Result<[u8; 32], KeyError> {
    if wrap.len() < MIN_KEYFILE_SECRET {
        return Err(KeyError::Io(format!(
            "key file secret must be at least {MIN_KEYFILE_SECRET} bytes"
        )));
    }
    Ok(crypto::derive_subkey(wrap, KEYFILE_LABEL))
}

/// Reads a key file sealed by [`save_keyfile`] under `wrap`.
pub fn load_keyfile(path: &Path, config: KeySetConfig, wrap: &[u8]) -> Result<KeySet, KeyError> {
    let key = keyfile_key(wrap)?;
    let bad = |m: &dyn fmt::Display| KeyError::Io(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(&e))?;
    let env: KeyFileEnvelope = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    if env.v != 1 {
        return Err(bad(&format!("unsupported version {}", env.v)));
    }
    let nonce: [u8; NONCE_LEN] = STANDARD
        .decode(&env.nonce)
        .ok()
        .and_then(|n| n.try_into().ok())
        .ok_or_else(|| bad(&"bad nonce"))?;
    let ct = STANDARD.decode(&env.ciphertext).map_err(|e| bad(&e))?;
    let mut plain = crypto::aes256gcm_decrypt(&key, &nonce, KEYFILE_LABEL.as_bytes(), &ct)
        .ok_or_else(|| bad(&"wrong secret or corrupted file"))?;
    let keys: Result<Vec<SigningKey>, _> = serde_json::from_slice(&plain);
    plain.zeroize();
    KeySet::from_keys(keys.map_err(|e| bad(&e))?, config)
}

/// Writes the key set sealed under `wrap`, owner-only, replacing the file
/// atomically.
pub fn save_keyfile(path: &Path, keys: &KeySet, wrap: &[u8]) -> Result<(), KeyError> {
    let key = keyfile_key(wrap)?;
    let io = |e: std::io::Error| KeyError::Io(format!("{}: {e}", path.display()));
    let mut plain = serde_json::to_vec(&keys.to_keys()).expect("keys serialize");
    let nonce = crypto::random_bytes::<NONCE_LEN>();
    let ct = crypto::aes256gcm_encrypt(&key, &nonce, KEYFILE_LABEL.as_bytes(), &plain);
    plain.zeroize();
    let env = KeyFileEnvelope {
        v: 1,
        nonce: STANDARD.encode(nonce),
        ciphertext: STANDARD.encode(ct),
    };
    let json = serde_json::to_vec_pretty(&env).expect("envelope serializes");
    let tmp = path.with_extension("tmp");
    {
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut file = opts.open(&tmp).map_err(io)?;
        file.write_all(&json).map_err(io)?;
        file.sync_all().map_err(io)?;
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&tmp, fs::Permissions::from_mode(0o600)).map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

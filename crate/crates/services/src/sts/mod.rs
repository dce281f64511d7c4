//! Security token service: authenticates credentials and issues, refreshes,
//! introspects and revokes token pairs.

pub mod http;
mod store;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use msag_core::audit::{Component, EventSink, LogEvent, Outcome};
use msag_core::keystore::KeyRing;
use msag_core::token::{sign_token, verify_token_with_skew, DEFAULT_SKEW_TOLERANCE};
use msag_core::{crypto, EncodedToken, SharedClock, TokenClaims, TokenUse, VerifyOutcome};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idp::{Credentials, IdentityProvider, Principal};

pub use store::SealedStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsConfig {
    #[serde(default = "default_issuer")]
    pub issuer: String,
    #[serde(default = "default_audience")]
    pub audience: String,
    #[serde(default = "default_access_ttl")]
    pub access_ttl: i64,
    #[serde(default = "default_refresh_ttl")]
    pub refresh_ttl: i64,
    #[serde(default = "default_skew")]
    pub skew_tolerance: i64,
}

fn default_issuer() -> String {
    "msag-sts".into()
}
fn default_audience() -> String {
    "msag-gateway".into()
}
fn default_access_ttl() -> i64 {
    300
}
fn default_refresh_ttl() -> i64 {
    86_400
}
fn default_skew() -> i64 {
    DEFAULT_SKEW_TOLERANCE
}

impl Default for StsConfig {
    fn default() -> Self {
        Self {
            issuer: default_issuer(),
            audience: default_audience(),
            access_ttl: default_access_ttl(),
            refresh_ttl: default_refresh_ttl(),
            skew_tolerance: default_skew(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("access_ttl must be positive")]
    AccessTtl,
    #[error("refresh_ttl ({refresh}) must exceed access_ttl ({access})")]
    RefreshTtl { access: i64, refresh: i64 },
    #[error("key retire_lag {retire_lag}s is shorter than refresh_ttl {refresh}s")]
    RetireLag { retire_lag: i64, refresh: i64 },
}

impl StsConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.access_ttl <= 0 {
            return Err(ConfigError::AccessTtl);
        }
        if self.refresh_ttl <= self.access_ttl {
            return Err(ConfigError::RefreshTtl {
                access: self.access_ttl,
                refresh: self.refresh_ttl,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub access: EncodedToken,
    pub refresh: EncodedToken,
    pub expires_in: i64,
}

/// Server-side state of one refresh token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub jti: String,
    pub subject_id: String,
    pub exp: i64,
    pub used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InactiveReason {
    Expired,
    Invalid,
    Revoked,
}

impl InactiveReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InactiveReason::Expired => "expired",
            InactiveReason::Invalid => "invalid",
            InactiveReason::Revoked => "revoked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Introspection {
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<TokenClaims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<InactiveReason>,
}

impl Introspection {
    fn inactive(reason: InactiveReason) -> Self {
        Self {
            active: false,
            claims: None,
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StsError {
    /// Uniform for unknown accounts and wrong secrets.
    #[error("invalid credentials")]
    InvalidCredentials,
    /// Expired, unknown, reused, revoked or forged refresh token. The client
    /// must log in again.
    #[error("invalid refresh token")]
    InvalidRefresh,
    #[error("token issuance failed")]
    Internal,
}

impl StsError {
    pub fn code(self) -> &'static str {
        match self {
            StsError::InvalidCredentials => "invalid_credentials",
            StsError::InvalidRefresh => "invalid_refresh",
            StsError::Internal => "server_error",
        }
    }
}

pub struct Sts {
    config: StsConfig,
    idp: Arc<dyn IdentityProvider>,
    keys: KeyRing,
    refresh_store: SealedStore,
    revoked: RwLock<HashSet<String>>,
    /// Live jtis per subject, for subject-wide revocation.
    issued: Mutex<HashMap<String, Vec<(String, i64)>>>,
    sink: Arc<dyn EventSink>,
    clock: SharedClock,
}

impl std::fmt::Debug for Sts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sts")
            .field("config", &self.config)
            .field("refresh_records", &self.refresh_store.len())
            .field("revoked", &self.revoked.read().len())
            .finish_non_exhaustive()
    }
}

const REVOCATIONS_ID: &str = "revocations";

impl Sts {
    pub fn new(
        config: StsConfig,
        idp: Arc<dyn IdentityProvider>,
        keys: KeyRing,
        refresh_store: SealedStore,
        sink: Arc<dyn EventSink>,
        clock: SharedClock,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let retire_lag = keys.snapshot().config().retire_lag;
        if retire_lag < config.refresh_ttl {
            return Err(ConfigError::RetireLag {
                retire_lag,
                refresh: config.refresh_ttl,
            });
        }
        let revoked: HashSet<String> = refresh_store
            .get::<Vec<String>>(REVOCATIONS_ID)
            .ok()
            .flatten()
            .unwrap_or_default()
            .into_iter()
            .collect();
        Ok(Self {
            config,
            idp,
            keys,
            refresh_store,
            revoked: RwLock::new(revoked),
            issued: Mutex::new(HashMap::new()),
            sink,
            clock,
        })
    }

    pub fn config(&self) -> &StsConfig {
        &self.config
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    fn event(&self, cid: &str, ty: &str, outcome: Outcome) -> LogEvent {
        LogEvent::new(self.clock.now_millis(), cid, Component::Sts, ty, outcome)
    }

    fn issue(&self, principal: &Principal, now: i64) -> Result<TokenPair, StsError> {
        let keys = self.keys.snapshot();
        let key = keys.try_active().ok_or(StsError::Internal)?;
        let base = TokenClaims {
            sub: principal.subject_id().to_owned(),
            iss: self.config.issuer.clone(),
            aud: self.config.audience.clone(),
            iat: now,
            exp: now + self.config.access_ttl,
            jti: crypto::random_id(),
            token_use: TokenUse::Access,
            scopes: principal.allowed_scopes().clone(),
            tier: principal.tier(),
        };
        let refresh_claims = TokenClaims {
            exp: now + self.config.refresh_ttl,
            jti: crypto::random_id(),
            token_use: TokenUse::Refresh,
            scopes: BTreeSet::new(),
            ..base.clone()
        };
        let access = sign_token(&base, key).map_err(|_| StsError::Internal)?;
        let refresh = sign_token(&refresh_claims, key).map_err(|_| StsError::Internal)?;
        let record = RefreshRecord {
            jti: refresh_claims.jti.clone(),
            subject_id: refresh_claims.sub.clone(),
            exp: refresh_claims.exp,
            used: false,
        };
        self.refresh_store
            .put(&record.jti, &record)
            .map_err(|_| StsError::Internal)?;
        let mut issued = self.issued.lock();
        let live = issued.entry(base.sub.clone()).or_default();
        live.retain(|(_, exp)| *exp + self.config.skew_tolerance >= now);
        live.push((base.jti.clone(), base.exp));
        live.push((refresh_claims.jti.clone(), refresh_claims.exp));
        Ok(TokenPair {
            access,
            refresh,
            expires_in: self.config.access_ttl,
        })
    }

    pub fn authenticate(&self, creds: &Credentials, now: i64, cid: &str) -> Result<TokenPair, StsError> {
        let principal = match self.idp.lookup(creds) {
            Ok(p) => p,
            Err(_) => {
                self.sink.emit(
                    self.event(cid, "auth.failure", Outcome::Deny)
                        .with("grant", creds.grant_type())
                        .with("identity", creds.identity()),
                );
                return Err(StsError::InvalidCredentials);
            }
        };
        let pair = self.issue(&principal, now)?;
        self.sink.emit(
            self.event(cid, "auth.success", Outcome::Success)
                .subject(principal.subject_id())
                .with("grant", creds.grant_type())
                .with("tier", principal.tier().as_str())
                .with("jti", jti_of(&pair.access)),
        );
        Ok(pair)
    }

    pub fn refresh(&self, token: &str, now: i64, cid: &str) -> Result<TokenPair, StsError> {
        let fail = |reason: &str, subject: Option<&str>| {
            let mut ev = self.event(cid, "token.refresh_failed", Outcome::Deny).with("reason", reason);
            if let Some(s) = subject {
                ev = ev.subject(s);
            }
            self.sink.emit(ev);
            Err(StsError::InvalidRefresh)
        };

        let keys = self.keys.snapshot();
        let claims = match verify_token_with_skew(token, &keys, now, self.config.skew_tolerance) {
            VerifyOutcome::Valid(c) if c.token_use == TokenUse::Refresh => c,
            VerifyOutcome::Valid(_) => return fail("not_refresh_token", None),
            other => return fail(other.label(), None),
        };
        if self.revoked.read().contains(&claims.jti) {
            return fail("revoked", Some(&claims.sub));
        }

        #[derive(PartialEq)]
        enum Redeem {
            Ok,
            Unknown,
            Reused,
            Expired,
        }
        let verdict = self.refresh_store.update::<RefreshRecord, Redeem>(&claims.jti, |rec| match rec {
            None => (None, Redeem::Unknown),
            Some(r) if r.used => (None, Redeem::Reused),
            Some(r) if now > r.exp + self.config.skew_tolerance => (None, Redeem::Expired),
            Some(r) => (Some(RefreshRecord { used: true, ..r }), Redeem::Ok),
        });
        match verdict {
            Ok(Redeem::Ok) => {}
            Ok(Redeem::Reused) => {
                self.sink.emit(
                    self.event(cid, "token.reuse", Outcome::Deny)
                        .subject(&claims.sub)
                        .with("jti", claims.jti.clone()),
                );
                return fail("reused", Some(&claims.sub));
            }
            Ok(Redeem::Unknown) => return fail("unknown", Some(&claims.sub)),
            Ok(Redeem::Expired) => return fail("expired", Some(&claims.sub)),
            Err(_) => return fail("unreadable_record", Some(&claims.sub)),
        }

        let Some(principal) = self.idp.principal(&claims.sub) else {
            return fail("unknown_subject", Some(&claims.sub));
        };
        let pair = self.issue(&principal, now)?;
        self.sink.emit(
            self.event(cid, "token.refreshed", Outcome::Success)
                .subject(&claims.sub)
                .with("old_jti", claims.jti)
                .with("jti", jti_of(&pair.access)),
        );
        Ok(pair)
    }

    pub fn introspect(&self, token: &str, now: i64, cid: &str) -> Introspection {
        let keys = self.keys.snapshot();
        let result = match verify_token_with_skew(token, &keys, now, self.config.skew_tolerance) {
            VerifyOutcome::Valid(c) if c.token_use != TokenUse::Access => Introspection::inactive(InactiveReason::Invalid),
            VerifyOutcome::Valid(c) if self.revoked.read().contains(&c.jti) => {
                Introspection::inactive(InactiveReason::Revoked)
            }
            VerifyOutcome::Valid(c) => Introspection {
                active: true,
                claims: Some(c),
                reason: None,
            },
            VerifyOutcome::Expired => Introspection::inactive(InactiveReason::Expired),
            _ => Introspection::inactive(InactiveReason::Invalid),
        };
        let mut ev = match (&result.claims, result.reason) {
            (Some(c), _) => self
                .event(cid, "token.introspected", Outcome::Success)
                .subject(&c.sub)
                .with("jti", c.jti.clone())
                .with("active", "true"),
            (None, reason) => self
                .event(cid, "token.introspected", Outcome::Deny)
                .with("active", "false")
                .with("reason", reason.map(InactiveReason::as_str).unwrap_or("invalid")),
        };
        if result.claims.is_none() {
            if let Some(c) = EncodedToken::new(token).peek_claims() {
                ev = ev.with("jti", c.jti);
            }
        }
        self.sink.emit(ev);
        result
    }

    /// Adds `jti` to the revocation set. Idempotent.
    pub fn revoke(&self, jti: &str, cid: &str) {
        let inserted = self.revoked.write().insert(jti.to_owned());
        self.persist_revocations();
        self.sink.emit(
            self.event(cid, "token.revoked", Outcome::Success)
                .with("jti", jti)
                .with("new", inserted.to_string()),
        );
    }

    /// Revokes every outstanding token issued to `subject`.
    pub fn revoke_subject(&self, subject: &str, cid: &str) -> usize {
        let jtis: Vec<String> = self
            .issued
            .lock()
            .get(subject)
            .map(|v| v.iter().map(|(j, _)| j.clone()).collect())
            .unwrap_or_default();
        let mut count = 0;
        {
            let mut revoked = self.revoked.write();
            for jti in &jtis {
                if revoked.insert(jti.clone()) {
                    count += 1;
                }
            }
        }
        self.persist_revocations();
        self.sink.emit(
            self.event(cid, "subject.revoked", Outcome::Success)
                .subject(subject)
                .with("count", count.to_string()),
        );
        count
    }

    pub fn is_revoked(&self, jti: &str) -> bool {
        self.revoked.read().contains(jti)
    }

    pub fn revoked_count(&self) -> usize {
        self.revoked.read().len()
    }

    fn persist_revocations(&self) {
        let mut list: Vec<String> = self.revoked.read().iter().cloned().collect();
        list.sort();
        if let Err(e) = self.refresh_store.put(REVOCATIONS_ID, &list) {
            tracing::warn!(error = %e, "could not persist revocation list");
        }
    }

    /// Applies the key rotation schedule; returns true when keys changed.
    pub fn rotate_keys(&self, now: i64, cid: &str) -> bool {
        let before = self.keys.snapshot().active().kid.clone();
        let changed = self.keys.rotate(now);
        if changed {
            let after = self.keys.snapshot().active().kid.clone();
            self.sink.emit(
                self.event(cid, "keys.rotated", Outcome::Success)
                    .with("previous", before)
                    .with("active", after),
            );
        }
        changed
    }

    /// Replaces the active key now, regardless of its age.
    pub fn force_rotate(&self, now: i64, cid: &str) {
        let before = self.keys.snapshot();
        let next = before.force_rotate(now);
        let after = next.active().kid.clone();
        self.keys.install(next);
        self.sink.emit(
            self.event(cid, "keys.rotated", Outcome::Success)
                .with("previous", before.active().kid.clone())
                .with("active", after)
                .with("forced", "true"),
        );
    }
}

fn jti_of(token: &EncodedToken) -> String {
    token.peek_claims().map(|c| c.jti).unwrap_or_default()
}

//! Identity providers.
//!
//! The STS only sees the [`IdentityProvider`] trait. [`InMemoryIdp`] keeps
//! salted PBKDF2-HMAC-SHA256 hashes for users and machine clients and
//! performs one derivation per lookup whether or not the account exists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use msag_core::crypto;
use msag_core::Tier;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const DEFAULT_PBKDF2_ITERATIONS: u32 = 100_000;

/// Credentials presented to the token endpoint.
#[derive(Clone, PartialEq, Eq)]
pub enum Credentials {
    Password { username: String, password: String },
    ClientCredentials { client_id: String, client_secret: String },
}

impl Credentials {
    pub fn password(username: impl Into<String>, password: impl Into<String>) -> Self {
        Credentials::Password {
            username: username.into(),
            password: password.into(),
        }
    }

    pub fn client(client_id: impl Into<String>, client_secret: impl Into<String>) -> Self {
        Credentials::ClientCredentials {
            client_id: client_id.into(),
            client_secret: client_secret.into(),
        }
    }

    /// The claimed identity, safe to log.
    pub fn identity(&self) -> &str {
        match self {
            Credentials::Password { username, .. } => username,
            Credentials::ClientCredentials { client_id, .. } => client_id,
        }
    }

    pub fn grant_type(&self) -> &'static str {
        match self {
            Credentials::Password { .. } => "password",
            Credentials::ClientCredentials { .. } => "client_credentials",
        }
    }
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credentials")
            .field("grant", &self.grant_type())
            .field("identity", &self.identity())
            .finish_non_exhaustive()
    }
}

/// An authenticated identity. Allowed scopes are derived from roles at
/// construction and cannot be set independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Principal {
    subject_id: String,
    roles: BTreeSet<String>,
    tier: Tier,
    allowed_scopes: BTreeSet<String>,
}

impl Principal {
    pub fn new(
        subject_id: impl Into<String>,
        roles: BTreeSet<String>,
        tier: Tier,
        role_scopes: &BTreeMap<String, BTreeSet<String>>,
    ) -> Self {
        let allowed_scopes = roles
            .iter()
            .filter_map(|r| role_scopes.get(r))
            .flatten()
            .cloned()
            .collect();
        Self {
            subject_id: subject_id.into(),
            roles,
            tier,
            allowed_scopes,
        }
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn roles(&self) -> &BTreeSet<String> {
        &self.roles
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn allowed_scopes(&self) -> &BTreeSet<String> {
        &self.allowed_scopes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LookupError {
    #[error("no such account")]
    NotFound,
    #[error("secret mismatch")]
    BadSecret,
}

pub trait IdentityProvider: Send + Sync {
    fn lookup(&self, credentials: &Credentials) -> Result<Principal, LookupError>;

    /// Current principal for a subject, used when refreshing without
    /// credentials. Role changes take effect at the next refresh.
    fn principal(&self, subject_id: &str) -> Option<Principal>;
}

/// Salted PBKDF2 hash.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordHash {
    salt: [u8; 16],
    hash: [u8; 32],
    iterations: u32,
}

impl fmt::Debug for PasswordHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PasswordHash")
            .field("iterations", &self.iterations)
            .finish_non_exhaustive()
    }
}

impl PasswordHash {
    pub fn new(secret: &str, iterations: u32) -> Self {
        let salt = crypto::random_bytes::<16>();
        Self {
            hash: derive(secret.as_bytes(), &salt, iterations),
            salt,
            iterations,
        }
    }

    pub fn verify(&self, secret: &str) -> bool {
        let candidate = derive(secret.as_bytes(), &self.salt, self.iterations);
        crypto::constant_time_eq(&candidate, &self.hash)
    }
}

fn derive(secret: &[u8], salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(secret, salt, iterations, &mut out);
    out
}

/// Account definition with the secret already resolved.
#[derive(Clone)]
pub struct AccountSpec {
    pub id: String,
    pub secret: String,
    pub roles: BTreeSet<String>,
    pub tier: Tier,
}

impl fmt::Debug for AccountSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccountSpec")
            .field("id", &self.id)
            .field("roles", &self.roles)
            .field("tier", &self.tier)
            .finish_non_exhaustive()
    }
}

#[derive(Debug)]
struct Account {
    hash: PasswordHash,
    roles: BTreeSet<String>,
    tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdpError {
    #[error("account {0}: tier public cannot be assigned to an identity")]
    PublicTier(String),
    #[error("account {0} defined twice")]
    Duplicate(String),
    #[error("account {id}: unknown role {role}")]
    UnknownRole { id: String, role: String },
}

pub struct InMemoryIdp {
    role_scopes: BTreeMap<String, BTreeSet<String>>,
    users: HashMap<String, Account>,
    clients: HashMap<String, Account>,
    decoy: PasswordHash,
    derivations: AtomicU64,
}

impl fmt::Debug for InMemoryIdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InMemoryIdp")
            .field("users", &self.users.len())
            .field("clients", &self.clients.len())
            .finish_non_exhaustive()
    }
}

impl InMemoryIdp {
    pub fn new(
        role_scopes: BTreeMap<String, BTreeSet<String>>,
        users: Vec<AccountSpec>,
        clients: Vec<AccountSpec>,
        iterations: u32,
    ) -> Result<Self, IdpError> {
        let build = |specs: Vec<AccountSpec>| -> Result<HashMap<String, Account>, IdpError> {
            let mut out = HashMap::new();
            for spec in specs {
                if spec.tier == Tier::Public {
                    return Err(IdpError::PublicTier(spec.id));
                }
                if let Some(role) = spec.roles.iter().find(|r| !role_scopes.contains_key(*r)) {
                    return Err(IdpError::UnknownRole { id: spec.id.clone(), role: role.clone() });
                }
                let account = Account {
                    hash: PasswordHash::new(&spec.secret, iterations),
                    roles: spec.roles,
                    tier: spec.tier,
                };
                if out.insert(spec.id.clone(), account).is_some() {
                    return Err(IdpError::Duplicate(spec.id));
                }
            }
            Ok(out)
        };
        let users = build(users)?;
        let clients = build(clients)?;
        Ok(Self {
            role_scopes,
            users,
            clients,
            decoy: PasswordHash::new(&crypto::random_id(), iterations),
            derivations: AtomicU64::new(0),
        })
    }

    /// Number of key derivations performed by lookups so far.
    pub fn derivations(&self) -> u64 {
        self.derivations.load(Ordering::Relaxed)
    }

    fn check(&self, table: &HashMap<String, Account>, id: &str, secret: &str) -> Result<Principal, LookupError> {
        self.derivations.fetch_add(1, Ordering::Relaxed);
        match table.get(id) {
            Some(account) => {
                if account.hash.verify(secret) {
                    Ok(Principal::new(id, account.roles.clone(), account.tier, &self.role_scopes))
                } else {
                    Err(LookupError::BadSecret)
                }
            }
            None => {
                // Same work as a real account so timing does not reveal existence.
                let _ = self.decoy.verify(secret);
                Err(LookupError::NotFound)
            }
        }
    }
}

impl IdentityProvider for InMemoryIdp {
    fn lookup(&self, credentials: &Credentials) -> Result<Principal, LookupError> {
        match credentials {
            Credentials::Password { username, password } => self.check(&self.users, username, password),
            Credentials::ClientCredentials { client_id, client_secret } => {
                self.check(&self.clients, client_id, client_secret)
            }
        }
    }

    fn principal(&self, subject_id: &str) -> Option<Principal> {
        self.users
            .get(subject_id)
            .or_else(|| self.clients.get(subject_id))
            .map(|a| Principal::new(subject_id, a.roles.clone(), a.tier, &self.role_scopes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idp() -> InMemoryIdp {
        let roles = BTreeMap::from([
            ("reader".to_string(), BTreeSet::from(["orders:read".to_string()])),
            (
                "writer".to_string(),
                BTreeSet::from(["orders:read".to_string(), "orders:write".to_string()]),
            ),
        ]);
        let users = vec![AccountSpec {
            id: "alice".into(),
            secret: "wonderland".into(),
            roles: BTreeSet::from(["reader".to_string(), "writer".to_string()]),
            tier: Tier::Authenticated,
        }];
        let clients = vec![AccountSpec {
            id: "sensor-1".into(),
            secret: "s3cret".into(),
            roles: BTreeSet::from(["reader".to_string()]),
            tier: Tier::Authenticated,
        }];
        InMemoryIdp::new(roles, users, clients, 1_000).unwrap()
    }

    #[test]
    fn scopes_are_union_of_roles() {
        let p = idp().lookup(&Credentials::password("alice", "wonderland")).unwrap();
        assert_eq!(p.allowed_scopes().len(), 2);
        assert_eq!(p.subject_id(), "alice");
    }

    #[test]
    fn unknown_and_bad_secret_cost_the_same() {
        let idp = idp();
        assert_eq!(idp.lookup(&Credentials::password("alice", "nope")), Err(LookupError::BadSecret));
        assert_eq!(idp.derivations(), 1);
        assert_eq!(idp.lookup(&Credentials::password("bob", "nope")), Err(LookupError::NotFound));
        assert_eq!(idp.derivations(), 2);
    }

    #[test]
    fn clients_and_users_are_separate_namespaces() {
        let idp = idp();
        assert!(idp.lookup(&Credentials::client("sensor-1", "s3cret")).is_ok());
        assert_eq!(idp.lookup(&Credentials::password("sensor-1", "s3cret")), Err(LookupError::NotFound));
        assert!(idp.principal("sensor-1").is_some());
    }

    #[test]
    fn debug_never_prints_secrets() {
        let c = Credentials::password("alice", "wonderland");
        assert!(!format!("{c:?}").contains("wonderland"));
        let h = PasswordHash::new("wonderland", 10);
        assert!(h.verify("wonderland"));
        assert!(!h.verify("Wonderland"));
    }

    #[test]
    fn unknown_role_is_rejected() {
        let err = InMemoryIdp::new(
            BTreeMap::new(),
            vec![AccountSpec {
                id: "x".into(),
                secret: "y".into(),
                roles: BTreeSet::from(["ghost".to_string()]),
                tier: Tier::Authenticated,
            }],
            vec![],
            10,
        )
        .unwrap_err();
        assert!(matches!(err, IdpError::UnknownRole { .. }));
    }
}

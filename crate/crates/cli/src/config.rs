//! Deployment configuration. Secrets never appear inline: each one is a
//! reference resolved from `MSAG_SECRET_<NAME>` at startup.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use msag_core::audit::{AnomalyRule, BreakerConfig};
use msag_core::{KeySetConfig, Tier};
use msag_services::gateway::{FacadeKey, GatewayProfile, Route, RouteTable};
use msag_services::idp::AccountSpec;
use msag_services::StsConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "MSAG_CONFIG";
pub const SECRET_ENV_PREFIX: &str = "MSAG_SECRET_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("secret {0} is not set (expected environment variable {SECRET_ENV_PREFIX}{0})")]
    MissingSecret(String),
}

/// Name of a secret held in the environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretRef {
    pub env: String,
}

impl SecretRef {
    pub fn new(name: &str) -> Self {
        Self { env: name.to_owned() }
    }

    fn check(&self) -> Result<(), ConfigError> {
        let ok = !self.env.is_empty()
            && self
                .env
                .chars()
                .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!(
                "secret reference {:?} must be UPPER_SNAKE_CASE",
                self.env
            )))
        }
    }

    pub fn variable(&self) -> String {
        format!("{SECRET_ENV_PREFIX}{}", self.env)
    }

    pub fn resolve(&self) -> Result<String, ConfigError> {
        std::env::var(self.variable()).map_err(|_| ConfigError::MissingSecret(self.env.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountConfig {
    pub id: String,
    pub secret: SecretRef,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    pub tier: Tier,
}

impl AccountConfig {
    pub fn resolve(&self) -> Result<AccountSpec, ConfigError> {
        Ok(AccountSpec {
            id: self.id.clone(),
            secret: self.secret.resolve()?,
            roles: self.roles.clone(),
            tier: self.tier,
        })
    }
}

fn default_iterations() -> u32 {
    100_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsSection {
    pub listen: SocketAddr,
    #[serde(default)]
    pub settings: StsConfig,
    #[serde(default = "default_iterations")]
    pub pbkdf2_iterations: u32,
    /// Scopes granted by each role.
    #[serde(default)]
    pub roles: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    pub users: Vec<AccountConfig>,
    #[serde(default)]
    pub clients: Vec<AccountConfig>,
    /// Sealed refresh-token store; in memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeysSection {
    #[serde(default)]
    pub schedule: KeySetConfig,
    pub keyfile: PathBuf,
    /// Wraps the key file; at least 32 bytes.
    pub secret: SecretRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileConfig {
    Public,
    Private {
        trusted_facades: BTreeMap<String, SecretRef>,
        elevation_scope: String,
    },
}

fn default_timeout_ms() -> u64 {
    2_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    pub name: String,
    pub listen: SocketAddr,
    pub profile: ProfileConfig,
    /// Base URL of the token service's introspection endpoint.
    pub sts_url: String,
    pub routes: Vec<Route>,
    #[serde(default = "default_timeout_ms")]
    pub introspect_timeout_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub upstream_timeout_ms: u64,
}

impl GatewaySection {
    pub fn profile(&self) -> Result<GatewayProfile, ConfigError> {
        Ok(match &self.profile {
            ProfileConfig::Public => GatewayProfile::Public,
            ProfileConfig::Private {
                trusted_facades,
                elevation_scope,
            } => GatewayProfile::Private {
                trusted_facades: trusted_facades
                    .iter()
                    .map(|(id, r)| Ok((id.clone(), FacadeKey(r.resolve()?.into_bytes()))))
                    .collect::<Result<_, ConfigError>>()?,
                elevation_scope: elevation_scope.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    /// Aggregator listen address.
    pub listen: SocketAddr,
    /// NDJSON file the aggregator appends to.
    pub sink: PathBuf,
    #[serde(default)]
    pub anomaly_rules: Vec<AnomalyRule>,
    #[serde(default)]
    pub breaker: BreakerConfig,
    /// Seconds between anomaly scans.
    #[serde(default = "default_scan_interval")]
    pub scan_interval: u64,
}

fn default_scan_interval() -> u64 {
    5
}

impl AuditSection {
    pub fn url(&self) -> String {
        format!("http://{}", self.listen)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub sts: StsSection,
    pub keys: KeysSection,
    #[serde(default)]
    pub gateways: Vec<GatewaySection>,
    /// Policy file, resolved relative to the config file.
    pub policy: PathBuf,
    pub audit: AuditSection,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; relative file paths inside are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.keys.keyfile);
        fix(&mut self.policy);
        fix(&mut self.audit.sink);
        if let Some(s) = &mut self.sts.store {
            fix(s);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.sts.settings.validate().map_err(|e| invalid(e.to_string()))?;
        if self.keys.schedule.rotation_period <= 0 {
            return Err(invalid("keys.schedule.rotation_period must be positive".into()));
        }
        if self.keys.schedule.retire_lag < self.sts.settings.refresh_ttl {
            return Err(invalid("keys.schedule.retire_lag must cover sts.settings.refresh_ttl".into()));
        }
        self.keys.secret.check()?;
        let mut ids = BTreeSet::new();
        for a in self.sts.users.iter().chain(&self.sts.clients) {
            a.secret.check()?;
            if !ids.insert(&a.id) {
                return Err(invalid(format!("account {} defined twice", a.id)));
            }
            if let Some(r) = a.roles.iter().find(|r| !self.sts.roles.contains_key(*r)) {
                return Err(invalid(format!("account {} has undefined role {r}", a.id)));
            }
        }
        let mut names = BTreeSet::new();
        for g in &self.gateways {
            if !names.insert(&g.name) {
                return Err(invalid(format!("gateway {} defined twice", g.name)));
            }
            if let ProfileConfig::Private {
                trusted_facades,
                elevation_scope,
            } = &g.profile
            {
                if trusted_facades.is_empty() || elevation_scope.is_empty() {
                    return Err(invalid(format!(
                        "gateway {}: private profile needs trusted_facades and elevation_scope",
                        g.name
                    )));
                }
                for r in trusted_facades.values() {
                    r.check()?;
                }
            } else if let Some(r) = g.routes.iter().find(|r| r.via_private) {
                return Err(invalid(format!("gateway {}: public profile cannot carry private route {}", g.name, r.prefix)));
            }
            RouteTable::new(g.routes.clone()).map_err(|e| invalid(format!("gateway {}: {e}", g.name)))?;
        }
        for (i, rule) in self.audit.anomaly_rules.iter().enumerate() {
            rule.validate().map_err(|e| invalid(format!("anomaly rule {i}: {e}")))?;
        }
        Ok(())
    }
}

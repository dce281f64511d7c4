//! The standard loopback topology: STS, public and private gateways, a
//! façade and mock upstreams, all reading one simulated clock and writing to
//! one aggregator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use msag_core::audit::{
    Aggregator, AnomalyAction, AnomalyResponder, AnomalyRule, AnomalyScanner, BreakerConfig, Component, EventSink,
    TakenAction,
};
use msag_core::policy::{policy_from_entries, PolicyEntry};
use msag_core::{Clock, KeyRing, KeySet, KeySetConfig, PolicyTable, SharedClock, SimClock, Tier};
use msag_services::gateway::http::{HttpIntrospector, HttpUpstream};
use msag_services::gateway::{self, FacadeKey, Gateway, GatewayProfile, Route, RouteTable};
use msag_services::idp::AccountSpec;
use msag_services::server::{self, loopback, ServerHandle};
use msag_services::sts::{self, SealedStore, Sts, StsConfig};
use msag_services::InMemoryIdp;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::facade::Facade;
use crate::upstream::{Behavior, MockUpstream};

/// Simulated wall clock at boot (2023-11-14T22:13:20Z).
pub const EPOCH: i64 = 1_700_000_000;
pub const FACADE_IDENTITY: &str = "admin-facade";

#[derive(Debug, Error)]
pub enum BootError {
    #[error("topology boot failed: {0}")]
    Config(String),
    #[error("topology boot failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Tunables a scenario may override; everything else is fixed by the
/// standard topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySpec {
    pub sts: StsConfig,
    pub keys: KeySetConfig,
    pub breaker: BreakerConfig,
    pub anomaly_rules: Vec<AnomalyRule>,
    pub pbkdf2_iterations: u32,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            sts: StsConfig::default(),
            keys: KeySetConfig::default(),
            breaker: BreakerConfig::default(),
            anomaly_rules: standard_anomaly_rules(),
            pbkdf2_iterations: 10_000,
        }
    }
}

pub fn standard_anomaly_rules() -> Vec<AnomalyRule> {
    vec![
        AnomalyRule {
            window: 60,
            event_type: "auth.failure".into(),
            threshold: 10,
            action: AnomalyAction::Alert,
        },
        AnomalyRule {
            window: 300,
            event_type: "token.reuse".into(),
            threshold: 1,
            action: AnomalyAction::RevokeSubject,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct DemoAccount {
    pub id: &'static str,
    pub secret: &'static str,
    pub roles: &'static [&'static str],
    pub tier: Tier,
    pub machine: bool,
}

pub const ACCOUNTS: &[DemoAccount] = &[
    DemoAccount { id: "alice", secret: "alice-wonderland-7", roles: &["customer"], tier: Tier::Authenticated, machine: false },
    DemoAccount { id: "bob", secret: "bob-builder-3", roles: &["browser"], tier: Tier::Authenticated, machine: false },
    DemoAccount {
        id: "carol",
        secret: "carol-ops-9",
        roles: &["admin", "operator", "premium"],
        tier: Tier::Privileged,
        machine: false,
    },
    DemoAccount { id: "dave", secret: "dave-admin-5", roles: &["admin"], tier: Tier::Privileged, machine: false },
    DemoAccount {
        id: "thermostat-7",
        secret: "thermostat-secret-1",
        roles: &["telemetry"],
        tier: Tier::Authenticated,
        machine: true,
    },
];

pub fn account(id: &str) -> Option<&'static DemoAccount> {
    ACCOUNTS.iter().find(|a| a.id == id)
}

pub fn role_scopes() -> BTreeMap<String, BTreeSet<String>> {
    let table: &[(&str, &[&str])] = &[
        ("customer", &["orders:read", "catalog:read"]),
        ("browser", &["catalog:read"]),
        ("admin", &["admin:read"]),
        ("operator", &["elevated", "orders:read"]),
        ("premium", &["premium:read"]),
        ("telemetry", &["telemetry:write"]),
    ];
    table
        .iter()
        .map(|(r, s)| (r.to_string(), s.iter().map(|x| x.to_string()).collect()))
        .collect()
}

pub fn standard_policy() -> Vec<PolicyEntry> {
    let e = |route: &str, tier: Tier, scopes: &[&str]| PolicyEntry {
        route: route.into(),
        tier,
        scopes: scopes.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        e("sts-token", Tier::Public, &[]),
        e("catalog", Tier::Public, &[]),
        e("orders", Tier::Authenticated, &["orders:read"]),
        e("telemetry", Tier::Authenticated, &["telemetry:write"]),
        e("flaky", Tier::Authenticated, &["orders:read"]),
        e("admin-facade", Tier::Authenticated, &[]),
        e("admin", Tier::Privileged, &["admin:read"]),
        e("premium", Tier::Privileged, &["premium:read"]),
    ]
}

pub const ELEVATION_SCOPE: &str = "elevated";

fn upstream_specs() -> Vec<(&'static str, Behavior)> {
    vec![
        (
            "catalog",
            Behavior::FixedResponse {
                status: 200,
                body: serde_json::json!({"items": ["lamp", "kettle", "chair"]}),
            },
        ),
        ("orders", Behavior::EchoHeaders),
        ("telemetry", Behavior::EchoHeaders),
        ("flaky", Behavior::FailNTimes { n: 5 }),
        ("admin", Behavior::EchoHeaders),
        ("premium", Behavior::EchoHeaders),
    ]
}

/// Private upstream names; only the private gateway routes to them.
pub const PRIVATE_UPSTREAMS: [&str; 2] = ["admin", "premium"];

pub struct Topology {
    pub spec: TopologySpec,
    pub clock: SimClock,
    pub log: Arc<Aggregator>,
    pub policy: Arc<PolicyTable>,
    pub sts: Arc<Sts>,
    pub public: Arc<Gateway>,
    pub private: Arc<Gateway>,
    pub facade_key: FacadeKey,
    pub upstreams: BTreeMap<String, Arc<MockUpstream>>,
    pub sts_url: String,
    pub public_url: String,
    pub private_url: String,
    pub facade_url: String,
    pub upstream_urls: BTreeMap<String, String>,
    sts_server: Mutex<Option<ServerHandle>>,
    servers: Mutex<Vec<ServerHandle>>,
    scanner: Mutex<AnomalyScanner>,
}

impl std::fmt::Debug for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Topology")
            .field("public_url", &self.public_url)
            .field("private_url", &self.private_url)
            .field("sts_url", &self.sts_url)
            .finish_non_exhaustive()
    }
}

struct Responder<'a> {
    sts: &'a Sts,
    gateway: &'a Gateway,
}

impl AnomalyResponder for Responder<'_> {
    fn revoke_subject(&self, subject: &str) -> usize {
        self.sts.revoke_subject(subject, "anomaly-response")
    }

    fn open_breaker(&self, upstream: &str, now: i64) {
        self.gateway.breakers().force_open(upstream, now, "anomaly-response");
    }
}

impl Topology {
    /// Boots every component on loopback with ephemeral ports. Events go to
    /// an in-memory aggregator, mirrored to `sink` as NDJSON when given.
    pub async fn boot(spec: TopologySpec, sink: Option<PathBuf>) -> Result<Self, BootError> {
        let cfg = |e: &dyn std::fmt::Display| BootError::Config(e.to_string());
        let clock = SimClock::new(EPOCH);
        let shared: SharedClock = Arc::new(clock.clone());
        let log = Arc::new(match &sink {
            Some(path) => Aggregator::with_sink(path)?,
            None => Aggregator::in_memory(),
        });
        let events: Arc<dyn EventSink> = log.clone();
        let policy = Arc::new(policy_from_entries(standard_policy()).map_err(|e| cfg(&e))?);

        let spec_of = |a: &DemoAccount| AccountSpec {
            id: a.id.into(),
            secret: a.secret.into(),
            roles: a.roles.iter().map(|r| r.to_string()).collect(),
            tier: a.tier,
        };
        let idp = InMemoryIdp::new(
            role_scopes(),
            ACCOUNTS.iter().filter(|a| !a.machine).map(spec_of).collect(),
            ACCOUNTS.iter().filter(|a| a.machine).map(spec_of).collect(),
            spec.pbkdf2_iterations,
        )
        .map_err(|e| cfg(&e))?;
        let keys = KeyRing::new(KeySet::generate(clock.now(), spec.keys));
        let sts = Arc::new(
            Sts::new(
                spec.sts.clone(),
                Arc::new(idp),
                keys.clone(),
                SealedStore::in_memory(keys),
                events.clone(),
                shared.clone(),
            )
            .map_err(|e| cfg(&e))?,
        );
        let sts_server = server::spawn(sts::http::router(sts.clone()), loopback()).await?;
        let sts_url = sts_server.url();

        let mut servers = Vec::new();
        let mut upstreams = BTreeMap::new();
        let mut upstream_urls = BTreeMap::new();
        for (name, behavior) in upstream_specs() {
            let up = MockUpstream::new(name, behavior, events.clone(), shared.clone());
            let handle = server::spawn(up.router(), loopback()).await?;
            upstream_urls.insert(name.to_string(), handle.url());
            upstreams.insert(name.to_string(), up);
            servers.push(handle);
        }

        let introspector = Arc::new(HttpIntrospector::new(&sts_url, Duration::from_secs(2)));
        let forwarder = Arc::new(HttpUpstream::new(Duration::from_secs(5)));
        let facade_key = FacadeKey(msag_core::crypto::random_bytes::<32>().to_vec());

        let private_routes = RouteTable::new(vec![
            Route::new("/admin", &upstream_urls["admin"], "admin").private(),
            Route::new("/premium", &upstream_urls["premium"], "premium").private(),
        ])
        .map_err(|e| cfg(&e))?;
        let private = Arc::new(
            Gateway::new(
                GatewayProfile::Private {
                    trusted_facades: BTreeMap::from([(FACADE_IDENTITY.to_string(), facade_key.clone())]),
                    elevation_scope: ELEVATION_SCOPE.into(),
                },
                private_routes,
                policy.clone(),
                introspector.clone(),
                forwarder.clone(),
                spec.breaker,
                events.clone(),
                shared.clone(),
            )
            .map_err(|e| cfg(&e))?,
        );
        let private_server = server::spawn(gateway::http::router(private.clone()), loopback()).await?;
        let private_url = private_server.url();
        servers.push(private_server);

        let facade = Facade::new(FACADE_IDENTITY, facade_key.clone(), &private_url, events.clone(), shared.clone());
        let facade_server = server::spawn(facade.router(), loopback()).await?;
        let facade_url = facade_server.url();
        servers.push(facade_server);

        let mut facade_route = Route::new(crate::facade::FACADE_PREFIX, &facade_url, "admin-facade");
        facade_route.delegate_token = true;
        let public_routes = RouteTable::new(vec![
            Route::new("/token", &sts_url, "sts-token"),
            Route::new("/catalog", &upstream_urls["catalog"], "catalog"),
            Route::new("/orders", &upstream_urls["orders"], "orders"),
            Route::new("/telemetry", &upstream_urls["telemetry"], "telemetry"),
            Route::new("/flaky", &upstream_urls["flaky"], "flaky"),
            facade_route,
        ])
        .map_err(|e| cfg(&e))?;
        let public = Arc::new(
            Gateway::new(
                GatewayProfile::Public,
                public_routes,
                policy.clone(),
                introspector,
                forwarder,
                spec.breaker,
                events.clone(),
                shared.clone(),
            )
            .map_err(|e| cfg(&e))?,
        );
        let public_server = server::spawn(gateway::http::router(public.clone()), loopback()).await?;
        let public_url = public_server.url();
        servers.push(public_server);

        let scanner = AnomalyScanner::new(spec.anomaly_rules.clone(), Component::Harness).map_err(|e| cfg(&e))?;
        Ok(Self {
            spec,
            clock,
            log,
            policy,
            sts,
            public,
            private,
            facade_key,
            upstreams,
            sts_url,
            public_url,
            private_url,
            facade_url,
            upstream_urls,
            sts_server: Mutex::new(Some(sts_server)),
            servers: Mutex::new(servers),
            scanner: Mutex::new(scanner),
        })
    }

    pub fn upstream(&self, name: &str) -> Option<&Arc<MockUpstream>> {
        self.upstreams.get(name)
    }

    /// Total requests received by all mock upstreams.
    pub fn upstream_request_count(&self) -> usize {
        self.upstreams.values().map(|u| u.request_count()).sum()
    }

    /// Stops the STS; later introspection calls fail to connect.
    pub async fn kill_sts(&self) {
        let handle = self.sts_server.lock().take();
        if let Some(h) = handle {
            let _ = h.shutdown().await;
        }
    }

    pub fn sts_running(&self) -> bool {
        self.sts_server.lock().is_some()
    }

    pub fn anomaly_scan(&self) -> Vec<TakenAction> {
        let responder = Responder {
            sts: &self.sts,
            gateway: &self.public,
        };
        self.scanner.lock().scan(&self.log, self.clock.now(), &responder)
    }

    pub async fn shutdown(self) {
        self.kill_sts().await;
        let servers = std::mem::take(&mut *self.servers.lock());
        for s in servers {
            let _ = s.shutdown().await;
        }
        let _ = self.log.flush();
    }
}

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use msag_core::audit::{Aggregator, EventFilter};
use msag_core::policy::{policy_from_entries, PolicyEntry};
use msag_core::{SimClock, Tier, TokenUse};
use parking_lot::Mutex;

use super::*;

#[derive(Default)]
struct FakeSts {
    tokens: HashMap<String, Introspection>,
    down: AtomicBool,
}

#[async_trait]
impl Introspector for FakeSts {
    async fn introspect(&self, token: &str, _cid: &str) -> Result<Introspection, IntrospectError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(IntrospectError("connection refused".into()));
        }
        Ok(self.tokens.get(token).cloned().unwrap_or(Introspection {
            active: false,
            claims: None,
            reason: Some(InactiveReason::Invalid),
        }))
    }
}

#[derive(Default)]
struct Recorder {
    seen: Mutex<Vec<GatewayRequest>>,
    status: Mutex<Option<StatusCode>>,
    unreachable: AtomicBool,
}

#[async_trait]
impl Upstream for Recorder {
    async fn send(&self, _base: &str, request: GatewayRequest) -> Result<GatewayResponse, UpstreamError> {
        if self.unreachable.load(Ordering::SeqCst) {
            return Err(UpstreamError("refused".into()));
        }
        self.seen.lock().push(request);
        Ok(GatewayResponse {
            status: self.status.lock().unwrap_or(StatusCode::OK),
            headers: HeaderMap::new(),
            body: b"ok".to_vec(),
        })
    }
}

fn claims(sub: &str, tier: Tier, scopes: &[&str]) -> TokenClaims {
    TokenClaims {
        sub: sub.into(),
        iss: "sts".into(),
        aud: "gw".into(),
        iat: 0,
        exp: 300,
        jti: format!("jti-{sub}"),
        token_use: TokenUse::Access,
        scopes: scopes.iter().map(|s| s.to_string()).collect(),
        tier,
    }
}

fn active(c: TokenClaims) -> Introspection {
    Introspection {
        active: true,
        claims: Some(c),
        reason: None,
    }
}

fn inactive(reason: InactiveReason) -> Introspection {
    Introspection {
        active: false,
        claims: None,
        reason: Some(reason),
    }
}

fn policy() -> Arc<PolicyTable> {
    let entry = |route: &str, tier: Tier, scopes: &[&str]| PolicyEntry {
        route: route.into(),
        tier,
        scopes: scopes.iter().map(|s| s.to_string()).collect(),
    };
    Arc::new(
        policy_from_entries(vec![
            entry("catalog", Tier::Public, &[]),
            entry("orders", Tier::Authenticated, &["orders:read"]),
            entry("admin", Tier::Privileged, &["admin:read"]),
        ])
        .unwrap(),
    )
}

struct Rig {
    gw: Gateway,
    sts: Arc<FakeSts>,
    up: Arc<Recorder>,
    log: Arc<Aggregator>,
}

fn fake_sts() -> FakeSts {
    let mut sts = FakeSts::default();
    sts.tokens
        .insert("alice".into(), active(claims("alice", Tier::Authenticated, &["orders:read"])));
    sts.tokens.insert("bob".into(), active(claims("bob", Tier::Authenticated, &[])));
    sts.tokens.insert(
        "root".into(),
        active(claims("root", Tier::Privileged, &["admin:read", "elevated"])),
    );
    sts.tokens.insert(
        "root-plain".into(),
        active(claims("root-plain", Tier::Privileged, &["admin:read"])),
    );
    sts.tokens.insert("old".into(), inactive(InactiveReason::Expired));
    sts.tokens.insert("gone".into(), inactive(InactiveReason::Revoked));
    sts
}

fn rig(profile: GatewayProfile, routes: Vec<Route>) -> Rig {
    let sts = Arc::new(fake_sts());
    let up = Arc::new(Recorder::default());
    let log = Arc::new(Aggregator::in_memory());
    let gw = Gateway::new(
        profile,
        RouteTable::new(routes).unwrap(),
        policy(),
        sts.clone(),
        up.clone(),
        BreakerConfig::default(),
        log.clone(),
        Arc::new(SimClock::new(1_000)),
    )
    .unwrap();
    Rig { gw, sts, up, log }
}

fn public() -> Rig {
    rig(
        GatewayProfile::Public,
        vec![
            Route::new("/catalog", "http://catalog", "catalog"),
            Route::new("/orders", "http://orders", "orders"),
            Route::new("/norule", "http://x", "norule"),
        ],
    )
}

fn private() -> Rig {
    rig(
        GatewayProfile::Private {
            trusted_facades: BTreeMap::from([("premium-facade".to_string(), FacadeKey(b"facade-key".to_vec()))]),
            elevation_scope: "elevated".into(),
        },
        vec![Route::new("/admin", "http://admin", "admin").private()],
    )
}

fn facade(req: GatewayRequest, cid: &str, key: &[u8]) -> GatewayRequest {
    req.header(CORRELATION_HEADER, cid)
        .header(FACADE_IDENTITY_HEADER, "premium-facade")
        .header(FACADE_SIGNATURE_HEADER, &facade_signature(&FacadeKey(key.to_vec()), cid))
}

async fn call(r: &Rig, req: GatewayRequest) -> (u16, Option<String>, Option<String>) {
    let resp = r.gw.handle(req).await;
    let reason = resp.json().and_then(|j| j.get("reason")?.as_str().map(str::to_owned));
    (resp.status.as_u16(), resp.error_code(), reason)
}

#[tokio::test]
async fn missing_token_is_401() {
    let r = public();
    let got = call(&r, GatewayRequest::get("/orders/1")).await;
    assert_eq!(got, (401, Some("missing_token".into()), None));
    assert!(r.up.seen.lock().is_empty());
}

#[tokio::test]
async fn expired_and_revoked_tokens() {
    let r = public();
    assert_eq!(
        call(&r, GatewayRequest::get("/orders").bearer("old")).await,
        (401, Some("token_expired".into()), None)
    );
    assert_eq!(
        call(&r, GatewayRequest::get("/orders").bearer("gone")).await,
        (401, Some("token_invalid".into()), Some("revoked".into()))
    );
    assert_eq!(
        call(&r, GatewayRequest::get("/orders").bearer("forged")).await,
        (401, Some("token_invalid".into()), Some("invalid".into()))
    );
}

#[tokio::test]
async fn allowed_request_is_forwarded_without_credentials() {
    let r = public();
    let req = GatewayRequest::get("/orders/7")
        .bearer("alice")
        .header("x-subject", "mallory")
        .header("x-scopes", "admin:read")
        .header(FACADE_IDENTITY_HEADER, "premium-facade");
    let resp = r.gw.handle(req).await;
    assert_eq!(resp.status, StatusCode::OK);
    let cid = resp.correlation_id().unwrap().to_owned();
    let seen = r.up.seen.lock();
    let h = &seen[0].headers;
    assert!(h.get("authorization").is_none());
    assert!(h.get(FACADE_IDENTITY_HEADER).is_none());
    assert_eq!(h.get("x-subject").unwrap(), "alice");
    assert_eq!(h.get("x-scopes").unwrap(), "orders:read");
    assert_eq!(h.get(CORRELATION_HEADER).unwrap().to_str().unwrap(), cid);

    let types: Vec<String> = r
        .log
        .query(&EventFilter::correlation(&cid))
        .into_iter()
        .map(|e| e.event_type)
        .collect();
    assert_eq!(
        types,
        [
            "gateway.ingress",
            "gateway.route",
            "gateway.token",
            "gateway.introspect",
            "gateway.policy",
            "gateway.forward",
            "filter.allow"
        ]
    );
}

#[tokio::test]
async fn supplied_correlation_id_is_kept() {
    let r = public();
    let resp = r
        .gw
        .handle(GatewayRequest::get("/catalog").header("X-Correlation-Id", "abc-123"))
        .await;
    assert_eq!(resp.correlation_id(), Some("abc-123"));
}

#[tokio::test]
async fn public_route_needs_no_token_and_skips_introspection() {
    let r = public();
    r.sts.down.store(true, Ordering::SeqCst);
    let (status, ..) = call(&r, GatewayRequest::get("/catalog/items")).await;
    assert_eq!(status, 200);
    let (status, ..) = call(&r, GatewayRequest::get("/catalog").bearer("alice")).await;
    assert_eq!(status, 200);
    assert!(r.up.seen.lock().iter().all(|q| q.headers.get("authorization").is_none()));
    assert!(r.log.query(&EventFilter::event_type("gateway.introspect")).is_empty());
}

#[tokio::test]
async fn policy_denials_carry_reason() {
    let r = public();
    assert_eq!(
        call(&r, GatewayRequest::get("/orders").bearer("bob")).await,
        (403, Some("forbidden".into()), Some("missing_scope".into()))
    );
    assert_eq!(
        call(&r, GatewayRequest::get("/norule").bearer("alice")).await,
        (403, Some("forbidden".into()), Some("no_rule".into()))
    );
}

#[tokio::test]
async fn earliest_failing_filter_wins() {
    let r = public();
    r.sts.down.store(true, Ordering::SeqCst);
    // no route + no token + STS down
    assert_eq!(call(&r, GatewayRequest::get("/nowhere")).await.1.as_deref(), Some("route_not_found"));
    // no token + STS down
    assert_eq!(call(&r, GatewayRequest::get("/norule")).await.1.as_deref(), Some("missing_token"));
    // STS down beats missing rule
    assert_eq!(
        call(&r, GatewayRequest::get("/norule").bearer("bob")).await.1.as_deref(),
        Some("sts_unavailable")
    );
    r.sts.down.store(false, Ordering::SeqCst);
    r.up.unreachable.store(true, Ordering::SeqCst);
    // expired token beats policy and upstream failures
    assert_eq!(
        call(&r, GatewayRequest::get("/norule").bearer("old")).await.1.as_deref(),
        Some("token_expired")
    );
    assert_eq!(
        call(&r, GatewayRequest::get("/norule").bearer("bob")).await.2.as_deref(),
        Some("no_rule")
    );
}

#[tokio::test]
async fn sts_outage_fails_closed() {
    let r = public();
    r.sts.down.store(true, Ordering::SeqCst);
    assert_eq!(
        call(&r, GatewayRequest::get("/orders").bearer("alice")).await,
        (503, Some("sts_unavailable".into()), None)
    );
    assert!(r.up.seen.lock().is_empty());
    assert_eq!(r.log.query(&EventFilter::event_type("filter.error")).len(), 1);
}

#[tokio::test]
async fn one_terminal_event_per_response() {
    let r = public();
    let paths = [
        GatewayRequest::get("/orders").bearer("alice"),
        GatewayRequest::get("/orders"),
        GatewayRequest::get("/nowhere"),
        GatewayRequest::get("/orders").bearer("bob"),
        GatewayRequest::get("/catalog"),
    ];
    let n = paths.len();
    for req in paths {
        r.gw.handle(req).await;
    }
    let terminal = r
        .log
        .all()
        .into_iter()
        .filter(|e| e.event_type.starts_with("filter."))
        .count();
    assert_eq!(terminal, n);
}

#[tokio::test]
async fn unreachable_upstream_trips_breaker() {
    let r = public();
    r.up.unreachable.store(true, Ordering::SeqCst);
    for _ in 0..5 {
        assert_eq!(
            call(&r, GatewayRequest::get("/catalog")).await.1.as_deref(),
            Some("upstream_unreachable")
        );
    }
    r.up.unreachable.store(false, Ordering::SeqCst);
    assert_eq!(call(&r, GatewayRequest::get("/catalog")).await.0, 503);
    assert!(r.up.seen.lock().is_empty());
    assert_eq!(r.log.query(&EventFilter::event_type("breaker.open")).len(), 1);
}

#[tokio::test]
async fn upstream_5xx_counts_as_failure() {
    let r = public();
    *r.up.status.lock() = Some(StatusCode::INTERNAL_SERVER_ERROR);
    for _ in 0..5 {
        assert_eq!(call(&r, GatewayRequest::get("/catalog")).await.0, 500);
    }
    assert_eq!(call(&r, GatewayRequest::get("/catalog")).await.1.as_deref(), Some("circuit_open"));
}

#[tokio::test]
async fn private_profile_requires_facade_and_elevation() {
    let r = private();
    let direct = call(&r, GatewayRequest::get("/admin").bearer("root")).await;
    assert_eq!(direct, (403, Some("forbidden".into()), Some("untrusted_origin".into())));

    let forged = facade(GatewayRequest::get("/admin").bearer("root"), "c-1", b"wrong-key");
    assert_eq!(call(&r, forged).await.2.as_deref(), Some("untrusted_origin"));

    let plain = facade(GatewayRequest::get("/admin").bearer("root-plain"), "c-2", b"facade-key");
    assert_eq!(call(&r, plain).await.2.as_deref(), Some("missing_elevation"));

    let ok = facade(GatewayRequest::get("/admin").bearer("root"), "c-3", b"facade-key");
    assert_eq!(call(&r, ok).await.0, 200);
    assert_eq!(r.up.seen.lock().len(), 1);
}

#[tokio::test]
async fn replayed_facade_signature_fails_for_other_correlation_id() {
    let r = private();
    let sig = facade_signature(&FacadeKey(b"facade-key".to_vec()), "c-1");
    let req = GatewayRequest::get("/admin")
        .bearer("root")
        .header(CORRELATION_HEADER, "c-2")
        .header(FACADE_IDENTITY_HEADER, "premium-facade")
        .header(FACADE_SIGNATURE_HEADER, &sig);
    assert_eq!(call(&r, req).await.2.as_deref(), Some("untrusted_origin"));
}

#[test]
fn public_profile_rejects_private_routes() {
    let err = Gateway::new(
        GatewayProfile::Public,
        RouteTable::new(vec![Route::new("/admin", "http://admin", "admin").private()]).unwrap(),
        policy(),
        Arc::new(FakeSts::default()),
        Arc::new(Recorder::default()),
        BreakerConfig::default(),
        Arc::new(Aggregator::in_memory()),
        Arc::new(SimClock::new(0)),
    )
    .unwrap_err();
    assert_eq!(err, GatewayConfigError::Routes(RouteError::PrivateOnPublic("admin".into())));
}

#[test]
fn elevate_check_examples() {
    let trusted = BTreeSet::from(["f".to_string()]);
    let c = claims("x", Tier::Privileged, &["elevated"]);
    let plain = claims("x", Tier::Privileged, &[]);
    assert_eq!(elevate_check(Some(&c), &trusted, "elevated", Some("f")), Decision::Allow);
    assert_eq!(
        elevate_check(Some(&c), &trusted, "elevated", None),
        Decision::Deny(DenyReason::UntrustedOrigin)
    );
    assert_eq!(
        elevate_check(Some(&c), &trusted, "elevated", Some("g")),
        Decision::Deny(DenyReason::UntrustedOrigin)
    );
    assert_eq!(
        elevate_check(Some(&plain), &trusted, "elevated", Some("f")),
        Decision::Deny(DenyReason::MissingElevation)
    );
}

//! Filter-chain reverse proxy.
//!
//! [`Gateway::handle`] runs the filters in a fixed order and reports the
//! first failure: correlation id, route lookup, token extraction,
//! introspection, policy, façade/elevation (private profile only), breaker,
//! forward. Each filter emits one `gateway.*` event and every response emits
//! exactly one terminal `filter.allow`, `filter.deny` or `filter.error`.

pub mod http;
mod routes;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use axum::http::{HeaderMap, HeaderName, HeaderValue, Method, StatusCode};
use msag_core::audit::{
    BreakerConfig, BreakerRegistry, CallOutcome, Component, EventSink, LogEvent, Outcome, CORRELATION_HEADER,
};
use msag_core::{crypto, evaluate, Decision, DenyReason, PolicyTable, SharedClock, TokenClaims};
use serde_json::json;
use thiserror::Error;

use crate::sts::{InactiveReason, Introspection};

pub use routes::{route_lookup, Route, RouteError, RouteTable};

pub const FACADE_IDENTITY_HEADER: &str = "x-facade-identity";
pub const FACADE_SIGNATURE_HEADER: &str = "x-facade-signature";
pub const DELEGATED_AUTH_HEADER: &str = "x-delegated-authorization";
pub const SUBJECT_HEADER: &str = "x-subject";
pub const SCOPES_HEADER: &str = "x-scopes";
pub const SCOPES_USED_HEADER: &str = "x-scopes-used";

/// Façade signing key, provisioned out of band.
#[derive(Clone, PartialEq, Eq)]
pub struct FacadeKey(pub Vec<u8>);

impl std::fmt::Debug for FacadeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FacadeKey(..)")
    }
}

/// Value of `X-Facade-Signature` for a request carrying `correlation_id`.
pub fn facade_signature(key: &FacadeKey, correlation_id: &str) -> String {
    hex::encode(crypto::hmac_sha256(&key.0, correlation_id.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatewayProfile {
    Public,
    Private {
        trusted_facades: BTreeMap<String, FacadeKey>,
        elevation_scope: String,
    },
}

impl GatewayProfile {
    pub fn component(&self) -> Component {
        match self {
            GatewayProfile::Public => Component::GatewayPublic,
            GatewayProfile::Private { .. } => Component::GatewayPrivate,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GatewayProfile::Public => "public",
            GatewayProfile::Private { .. } => "private",
        }
    }
}

/// Private-profile check. `facade_identity` is the identity whose signature
/// already verified, if any.
pub fn elevate_check(
    claims: Option<&TokenClaims>,
    trusted_facades: &BTreeSet<String>,
    elevation_scope: &str,
    facade_identity: Option<&str>,
) -> Decision {
    if !facade_identity.is_some_and(|id| trusted_facades.contains(id)) {
        return Decision::Deny(DenyReason::UntrustedOrigin);
    }
    if !claims.is_some_and(|c| c.has_scope(elevation_scope)) {
        return Decision::Deny(DenyReason::MissingElevation);
    }
    Decision::Allow
}

#[derive(Debug, Clone)]
pub struct GatewayRequest {
    pub method: Method,
    /// Path plus optional query string.
    pub path: String,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl GatewayRequest {
    pub fn get(path: &str) -> Self {
        Self {
            method: Method::GET,
            path: path.to_owned(),
            headers: HeaderMap::new(),
            body: Vec::new(),
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        if let (Ok(n), Ok(v)) = (HeaderName::try_from(name), HeaderValue::try_from(value)) {
            self.headers.insert(n, v);
        }
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header("authorization", &format!("Bearer {token}"))
    }
}

#[derive(Debug, Clone)]
pub struct GatewayResponse {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl GatewayResponse {
    fn error(status: StatusCode, error: &str, reason: Option<&str>) -> Self {
        let body = match reason {
            Some(r) => json!({"error": error, "reason": r}),
            None => json!({"error": error}),
        };
        let mut headers = HeaderMap::new();
        headers.insert("content-type", HeaderValue::from_static("application/json"));
        Self {
            status,
            headers,
            body: serde_json::to_vec(&body).expect("json"),
        }
    }

    pub fn json(&self) -> Option<serde_json::Value> {
        serde_json::from_slice(&self.body).ok()
    }

    /// The `error` field of a JSON error body.
    pub fn error_code(&self) -> Option<String> {
        self.json()?.get("error")?.as_str().map(str::to_owned)
    }

    pub fn correlation_id(&self) -> Option<&str> {
        self.headers.get(CORRELATION_HEADER)?.to_str().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("introspection failed: {0}")]
pub struct IntrospectError(pub String);

#[async_trait]
pub trait Introspector: Send + Sync {
    async fn introspect(&self, token: &str, correlation_id: &str) -> Result<Introspection, IntrospectError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("upstream unreachable: {0}")]
pub struct UpstreamError(pub String);

#[async_trait]
pub trait Upstream: Send + Sync {
    /// Sends `request` to `base_url` + `request.path`.
    async fn send(&self, base_url: &str, request: GatewayRequest) -> Result<GatewayResponse, UpstreamError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayConfigError {
    #[error(transparent)]
    Routes(#[from] RouteError),
    #[error("private profile needs at least one trusted façade")]
    NoFacades,
    #[error("private profile needs an elevation scope")]
    NoElevationScope,
}

pub struct Gateway {
    profile: GatewayProfile,
    routes: RouteTable,
    policy: Arc<PolicyTable>,
    introspector: Arc<dyn Introspector>,
    upstream: Arc<dyn Upstream>,
    breakers: Arc<BreakerRegistry>,
    sink: Arc<dyn EventSink>,
    clock: SharedClock,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("profile", &self.profile.name())
            .field("routes", &self.routes.routes().len())
            .finish_non_exhaustive()
    }
}

enum Flow {
    Deny(GatewayResponse),
    Error(GatewayResponse),
}

impl Gateway {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        profile: GatewayProfile,
        routes: RouteTable,
        policy: Arc<PolicyTable>,
        introspector: Arc<dyn Introspector>,
        upstream: Arc<dyn Upstream>,
        breaker_config: BreakerConfig,
        sink: Arc<dyn EventSink>,
        clock: SharedClock,
    ) -> Result<Self, GatewayConfigError> {
        match &profile {
            GatewayProfile::Public => {
                if let Some(r) = routes.routes().iter().find(|r| r.via_private) {
                    return Err(RouteError::PrivateOnPublic(r.route_id.clone()).into());
                }
            }
            GatewayProfile::Private {
                trusted_facades,
                elevation_scope,
            } => {
                if trusted_facades.is_empty() {
                    return Err(GatewayConfigError::NoFacades);
                }
                if elevation_scope.is_empty() {
                    return Err(GatewayConfigError::NoElevationScope);
                }
            }
        }
        let breakers = Arc::new(BreakerRegistry::new(breaker_config, sink.clone(), profile.component()));
        Ok(Self {
            profile,
            routes,
            policy,
            introspector,
            upstream,
            breakers,
            sink,
            clock,
        })
    }

    pub fn profile(&self) -> &GatewayProfile {
        &self.profile
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn breakers(&self) -> &Arc<BreakerRegistry> {
        &self.breakers
    }

    fn event(&self, cid: &str, ty: &str, outcome: Outcome) -> LogEvent {
        LogEvent::new(self.clock.now_millis(), cid, self.profile.component(), ty, outcome)
    }

    pub async fn handle(&self, mut req: GatewayRequest) -> GatewayResponse {
        // (1) correlation id
        let cid = req
            .headers
            .get(CORRELATION_HEADER)
            .and_then(|v| v.to_str().ok())
            .filter(|v| !v.is_empty() && v.len() <= 128)
            .map(str::to_owned)
            .unwrap_or_else(msag_core::audit::new_correlation_id);
        req.headers
            .insert(CORRELATION_HEADER, HeaderValue::from_str(&cid).expect("ascii id"));
        self.sink.emit(
            self.event(&cid, "gateway.ingress", Outcome::Success)
                .with("method", req.method.as_str())
                .with("path", req.path.clone()),
        );

        let mut subject = None;
        let (mut resp, terminal) = match self.filters(req, &cid, &mut subject).await {
            Ok(resp) => (resp, ("filter.allow", Outcome::Success)),
            Err(Flow::Deny(resp)) => (resp, ("filter.deny", Outcome::Deny)),
            Err(Flow::Error(resp)) => (resp, ("filter.error", Outcome::Error)),
        };
        resp.headers
            .insert(CORRELATION_HEADER, HeaderValue::from_str(&cid).expect("ascii id"));
        let mut ev = self
            .event(&cid, terminal.0, terminal.1)
            .with("status", resp.status.as_u16().to_string());
        if let Some(code) = resp.error_code().filter(|_| !resp.status.is_success()) {
            ev = ev.with("error", code);
        }
        if let Some(s) = subject {
            ev = ev.subject(s);
        }
        self.sink.emit(ev);
        resp
    }

    fn deny(&self, cid: &str, filter: &str, status: StatusCode, error: &str, reason: Option<&str>) -> Flow {
        let mut ev = self.event(cid, filter, Outcome::Deny).with("error", error);
        if let Some(r) = reason {
            ev = ev.with("reason", r);
        }
        self.sink.emit(ev);
        Flow::Deny(GatewayResponse::error(status, error, reason))
    }

    async fn filters(
        &self,
        mut req: GatewayRequest,
        cid: &str,
        subject: &mut Option<String>,
    ) -> Result<GatewayResponse, Flow> {
        // (2) route lookup
        let Some(route) = self.routes.lookup(&req.path).cloned() else {
            return Err(self.deny(cid, "gateway.route", StatusCode::NOT_FOUND, "route_not_found", None));
        };
        self.sink.emit(
            self.event(cid, "gateway.route", Outcome::Success)
                .with("route_id", route.route_id.clone())
                .with("service", route.service_name()),
        );
        let rule = self.policy.get(&route.route_id);
        let public = rule.is_some_and(|r| r.required_tier == msag_core::Tier::Public);

        // (3) token extraction
        let token = bearer_token(&req.headers);
        if !public {
            match &token {
                Some(_) => self.sink.emit(self.event(cid, "gateway.token", Outcome::Success)),
                None => {
                    return Err(self.deny(cid, "gateway.token", StatusCode::UNAUTHORIZED, "missing_token", None));
                }
            }
        }

        // (4) introspection
        let claims = if public {
            None
        } else {
            let token = token.as_deref().expect("checked above");
            match self.introspector.introspect(token, cid).await {
                Err(e) => {
                    self.sink.emit(
                        self.event(cid, "gateway.introspect", Outcome::Error)
                            .with("error", "sts_unavailable")
                            .with("cause", e.0),
                    );
                    return Err(Flow::Error(GatewayResponse::error(
                        StatusCode::SERVICE_UNAVAILABLE,
                        "sts_unavailable",
                        None,
                    )));
                }
                Ok(Introspection {
                    active: true,
                    claims: Some(c),
                    ..
                }) => {
                    *subject = Some(c.sub.clone());
                    self.sink.emit(
                        self.event(cid, "gateway.introspect", Outcome::Success)
                            .subject(c.sub.clone())
                            .with("jti", c.jti.clone()),
                    );
                    Some(c)
                }
                Ok(i) => {
                    let reason = i.reason.unwrap_or(InactiveReason::Invalid);
                    let (error, why) = match reason {
                        InactiveReason::Expired => ("token_expired", None),
                        other => ("token_invalid", Some(other.as_str())),
                    };
                    return Err(self.deny(cid, "gateway.introspect", StatusCode::UNAUTHORIZED, error, why));
                }
            }
        };

        // (5) policy
        match evaluate(claims.as_ref(), &self.policy, &route.route_id) {
            Decision::Allow => self.sink.emit(
                self.event(cid, "gateway.policy", Outcome::Success)
                    .with("route_id", route.route_id.clone()),
            ),
            Decision::Deny(reason) => {
                return Err(self.deny(
                    cid,
                    "gateway.policy",
                    StatusCode::FORBIDDEN,
                    "forbidden",
                    Some(reason.as_str()),
                ));
            }
        }

        // (6) façade identity and elevation
        if let GatewayProfile::Private {
            trusted_facades,
            elevation_scope,
        } = &self.profile
        {
            let verified = verified_facade(&req.headers, trusted_facades, cid);
            let names: BTreeSet<String> = trusted_facades.keys().cloned().collect();
            match elevate_check(claims.as_ref(), &names, elevation_scope, verified.as_deref()) {
                Decision::Allow => self.sink.emit(
                    self.event(cid, "gateway.elevation", Outcome::Success)
                        .with("facade", verified.unwrap_or_default()),
                ),
                Decision::Deny(reason) => {
                    return Err(self.deny(
                        cid,
                        "gateway.elevation",
                        StatusCode::FORBIDDEN,
                        "forbidden",
                        Some(reason.as_str()),
                    ));
                }
            }
        }

        // (7) breaker
        let service = route.service_name().to_owned();
        let now = self.clock.now();
        if !self.breakers.try_acquire(&service, now, cid) {
            self.sink.emit(
                self.event(cid, "gateway.forward", Outcome::Error)
                    .with("upstream", service.clone())
                    .with("error", "circuit_open"),
            );
            return Err(Flow::Error(GatewayResponse::error(
                StatusCode::SERVICE_UNAVAILABLE,
                "circuit_open",
                Some(&service),
            )));
        }

        // (8) forward
        prepare_forward(&mut req, claims.as_ref(), route.delegate_token, token.as_deref());
        let required: Vec<String> = rule.map(|r| r.required_scopes.iter().cloned().collect()).unwrap_or_default();
        match self.upstream.send(&route.upstream, req).await {
            Ok(resp) => {
                let failed = resp.status.is_server_error();
                let outcome = if failed { CallOutcome::Failure } else { CallOutcome::Success };
                self.breakers.record(&service, outcome, self.clock.now(), cid);
                let used = resp
                    .headers
                    .get(SCOPES_USED_HEADER)
                    .and_then(|v| v.to_str().ok())
                    .map(str::to_owned)
                    .unwrap_or_else(|| required.join(" "));
                let mut ev = self
                    .event(cid, "gateway.forward", if failed { Outcome::Error } else { Outcome::Success })
                    .with("upstream", service)
                    .with("route_id", route.route_id.clone())
                    .with("status", resp.status.as_u16().to_string())
                    .with("scopes_used", used);
                if let Some(s) = subject.clone() {
                    ev = ev.subject(s);
                }
                self.sink.emit(ev);
                Ok(resp)
            }
            Err(e) => {
                self.breakers.record(&service, CallOutcome::Failure, self.clock.now(), cid);
                self.sink.emit(
                    self.event(cid, "gateway.forward", Outcome::Error)
                        .with("upstream", service)
                        .with("route_id", route.route_id.clone())
                        .with("error", "upstream_unreachable")
                        .with("cause", e.0),
                );
                Err(Flow::Error(GatewayResponse::error(
                    StatusCode::BAD_GATEWAY,
                    "upstream_unreachable",
                    None,
                )))
            }
        }
    }
}

/// `Authorization: Bearer <token>`, case-insensitive scheme.
pub fn bearer_token(headers: &HeaderMap) -> Option<String> {
    let value = headers.get("authorization")?.to_str().ok()?.trim();
    let (scheme, token) = value.split_once(' ')?;
    let token = token.trim();
    (scheme.eq_ignore_ascii_case("bearer") && !token.is_empty()).then(|| token.to_owned())
}

fn verified_facade(headers: &HeaderMap, trusted: &BTreeMap<String, FacadeKey>, cid: &str) -> Option<String> {
    let identity = headers.get(FACADE_IDENTITY_HEADER)?.to_str().ok()?;
    let signature = headers.get(FACADE_SIGNATURE_HEADER)?.to_str().ok()?;
    let key = trusted.get(identity)?;
    let expected = facade_signature(key, cid);
    crypto::constant_time_eq(expected.as_bytes(), signature.as_bytes()).then(|| identity.to_owned())
}

const STRIPPED: [&str; 9] = [
    "authorization",
    FACADE_IDENTITY_HEADER,
    FACADE_SIGNATURE_HEADER,
    DELEGATED_AUTH_HEADER,
    SUBJECT_HEADER,
    SCOPES_HEADER,
    "host",
    "content-length",
    "connection",
];

fn prepare_forward(req: &mut GatewayRequest, claims: Option<&TokenClaims>, delegate: bool, token: Option<&str>) {
    for name in STRIPPED {
        req.headers.remove(name);
    }
    if let Some(c) = claims {
        let scopes: Vec<&str> = c.scopes.iter().map(String::as_str).collect();
        if let Ok(v) = HeaderValue::from_str(&c.sub) {
            req.headers.insert(SUBJECT_HEADER, v);
        }
        if let Ok(v) = HeaderValue::from_str(&scopes.join(" ")) {
            req.headers.insert(SCOPES_HEADER, v);
        }
        if delegate {
            if let Some(Ok(v)) = token.map(|t| HeaderValue::from_str(&format!("Bearer {t}"))) {
                req.headers.insert(DELEGATED_AUTH_HEADER, v);
            }
        }
    }
}

#[cfg(test)]
mod tests;

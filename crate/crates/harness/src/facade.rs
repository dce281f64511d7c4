//! Façade service: the only caller the private gateway trusts.
//!
//! It sits behind the public gateway at `/facade/...`, takes the caller's
//! delegated token, signs the correlation id with its provisioned key and
//! relays the request to the private gateway with the `/facade` prefix removed.

use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::Response;
use axum::Router;
use msag_core::audit::{Component, EventSink, LogEvent, Outcome, CORRELATION_HEADER};
use msag_core::SharedClock;
use msag_services::gateway::{
    facade_signature, FacadeKey, DELEGATED_AUTH_HEADER, FACADE_IDENTITY_HEADER, FACADE_SIGNATURE_HEADER,
};

pub const FACADE_PREFIX: &str = "/facade";

pub struct Facade {
    pub identity: String,
    key: FacadeKey,
    private_url: String,
    client: reqwest::Client,
    sink: Arc<dyn EventSink>,
    clock: SharedClock,
}

impl Facade {
    pub fn new(
        identity: &str,
        key: FacadeKey,
        private_url: &str,
        sink: Arc<dyn EventSink>,
        clock: SharedClock,
    ) -> Arc<Self> {
        Arc::new(Self {
            identity: identity.to_owned(),
            key,
            private_url: private_url.trim_end_matches('/').to_owned(),
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(5))
                .build()
                .expect("http client"),
            sink,
            clock,
        })
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new().fallback(relay).with_state(self.clone())
    }
}

fn error(status: StatusCode, code: &str) -> Response {
    let mut r = Response::new(Body::from(serde_json::json!({"error": code}).to_string()));
    *r.status_mut() = status;
    r
}

async fn relay(State(f): State<Arc<Facade>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let Ok(body) = to_bytes(body, 1 << 20).await else {
        return error(StatusCode::PAYLOAD_TOO_LARGE, "body_too_large");
    };
    let cid = parts
        .headers
        .get(CORRELATION_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
        .unwrap_or_else(msag_core::audit::new_correlation_id);
    let full = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    let inner = full.strip_prefix(FACADE_PREFIX).unwrap_or(full);
    let inner = if inner.is_empty() { "/" } else { inner };

    let mut headers = HeaderMap::new();
    headers.insert(CORRELATION_HEADER, cid.parse().expect("ascii id"));
    headers.insert(FACADE_IDENTITY_HEADER, f.identity.parse().expect("ascii identity"));
    headers.insert(
        FACADE_SIGNATURE_HEADER,
        facade_signature(&f.key, &cid).parse().expect("hex"),
    );
    if let Some(v) = parts.headers.get(DELEGATED_AUTH_HEADER) {
        headers.insert("authorization", v.clone());
    }
    if let Some(v) = parts.headers.get("content-type") {
        headers.insert("content-type", v.clone());
    }
    f.sink.emit(
        LogEvent::new(f.clock.now_millis(), &cid, Component::Upstream, "facade.relay", Outcome::Success)
            .with("facade", f.identity.clone())
            .with("path", inner.to_owned()),
    );
    let sent = f
        .client
        .request(parts.method, format!("{}{}", f.private_url, inner))
        .headers(headers)
        .body(body.to_vec())
        .send()
        .await;
    let resp = match sent {
        Ok(r) => r,
        Err(_) => return error(StatusCode::BAD_GATEWAY, "private_gateway_unreachable"),
    };
    let status = resp.status();
    let content_type = resp.headers().get("content-type").cloned();
    let bytes = resp.bytes().await.unwrap_or_default();
    let mut out = Response::new(Body::from(bytes));
    *out.status_mut() = status;
    if let Some(ct) = content_type {
        out.headers_mut().insert("content-type", ct);
    }
    out
}

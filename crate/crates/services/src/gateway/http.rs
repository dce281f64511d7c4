//! HTTP adapters: the axum front end and reqwest-backed introspection and
//! upstream clients.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use msag_core::audit::CORRELATION_HEADER;

use super::{Gateway, GatewayRequest, GatewayResponse, IntrospectError, Introspector, Upstream, UpstreamError};
use crate::sts::Introspection;

const MAX_BODY: usize = 1 << 20;

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new().fallback(proxy).with_state(gateway)
}

async fn proxy(State(gw): State<Arc<Gateway>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let Ok(body) = to_bytes(body, MAX_BODY).await else {
        return (StatusCode::PAYLOAD_TOO_LARGE, "body too large").into_response();
    };
    let path = parts
        .uri
        .path_and_query()
        .map(|p| p.as_str().to_owned())
        .unwrap_or_else(|| "/".into());
    let resp = gw
        .handle(GatewayRequest {
            method: parts.method,
            path,
            headers: parts.headers,
            body: body.to_vec(),
        })
        .await;
    into_axum(resp)
}

fn into_axum(resp: GatewayResponse) -> Response {
    let mut out = Response::new(Body::from(resp.body));
    *out.status_mut() = resp.status;
    *out.headers_mut() = resp.headers;
    out
}

/// Calls `POST {sts_url}/introspect`.
#[derive(Debug, Clone)]
pub struct HttpIntrospector {
    client: reqwest::Client,
    url: String,
}

impl HttpIntrospector {
    pub fn new(sts_url: &str, timeout: Duration) -> Self {
        Self {
            client: reqwest::Client::builder().timeout(timeout).build().expect("http client"),
            url: format!("{}/introspect", sts_url.trim_end_matches('/')),
        }
    }
}

#[async_trait]
impl Introspector for HttpIntrospector {
    async fn introspect(&self, token: &str, correlation_id: &str) -> Result<Introspection, IntrospectError> {
        let resp = self
            .client
            .post(&self.url)
            .header(CORRELATION_HEADER, correlation_id)
            .form(&[("token", token)])
            .send()
            .await
            .map_err(|e| IntrospectError(e.without_url().to_string()))?;
        if !resp.status().is_success() {
            return Err(IntrospectError(format!("status {}", resp.status())));
        }
        resp.json::<Introspection>()
            .await
            .map_err(|e| IntrospectError(e.without_url().to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct HttpUpstream {
    client: reqwest::Client,
}

impl HttpUpstream {
    pub fn new(timeout: Duration) -> Self {
        Self {
            client: reqwest::Client::builder()
                .timeout(timeout)
                .redirect(reqwest::redirect::Policy::none())
                .build()
                .expect("http client"),
        }
    }
}

#[async_trait]
impl Upstream for HttpUpstream {
    async fn send(&self, base_url: &str, request: GatewayRequest) -> Result<GatewayResponse, UpstreamError> {
        let url = format!("{}{}", base_url.trim_end_matches('/'), request.path);
        let resp = self
            .client
            .request(request.method, url)
            .headers(request.headers)
            .body(request.body)
            .send()
            .await
            .map_err(|e| UpstreamError(e.without_url().to_string()))?;
        let status = resp.status();
        let mut headers = HeaderMap::new();
        for (name, value) in resp.headers() {
            if !matches!(name.as_str(), "content-length" | "transfer-encoding" | "connection") {
                headers.append(name.clone(), value.clone());
            }
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| UpstreamError(e.without_url().to_string()))?;
        Ok(GatewayResponse {
            status,
            headers,
            body: body.to_vec(),
        })
    }
}

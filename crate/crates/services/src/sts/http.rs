//! STS HTTP endpoints.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use msag_core::audit::{new_correlation_id, CORRELATION_HEADER};
use serde_json::json;

use super::{Sts, StsError, TokenPair};
use crate::idp::Credentials;

pub fn router(sts: Arc<Sts>) -> Router {
    Router::new()
        .route("/token", post(token))
        .route("/introspect", post(introspect))
        .route("/revoke", post(revoke))
        .route("/health", get(|| async { "ok" }))
        .with_state(sts)
}

fn correlation_id(headers: &HeaderMap) -> String {
    headers
        .get(CORRELATION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .map(str::to_owned)
        .unwrap_or_else(new_correlation_id)
}

fn error(status: StatusCode, code: &str, description: &str) -> Response {
    (status, Json(json!({"error": code, "error_description": description}))).into_response()
}

fn pair_json(pair: TokenPair) -> Response {
    Json(json!({
        "access_token": pair.access.as_str(),
        "refresh_token": pair.refresh.as_str(),
        "token_type": "Bearer",
        "expires_in": pair.expires_in,
    }))
    .into_response()
}

fn sts_error(e: StsError) -> Response {
    let status = match e {
        StsError::InvalidCredentials => StatusCode::UNAUTHORIZED,
        StsError::InvalidRefresh => StatusCode::BAD_REQUEST,
        StsError::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e.code(), &e.to_string())
}

async fn token(State(sts): State<Arc<Sts>>, headers: HeaderMap, Form(form): Form<HashMap<String, String>>) -> Response {
    let cid = correlation_id(&headers);
    let now = sts.clock().now();
    let field = |k: &str| form.get(k).map(String::as_str);
    let result = match field("grant_type") {
        Some("password") => match (field("username"), field("password")) {
            (Some(u), Some(p)) => sts.authenticate(&Credentials::password(u, p), now, &cid),
            _ => return error(StatusCode::BAD_REQUEST, "invalid_request", "username and password required"),
        },
        Some("client_credentials") => match (field("client_id"), field("client_secret")) {
            (Some(id), Some(secret)) => sts.authenticate(&Credentials::client(id, secret), now, &cid),
            _ => return error(StatusCode::BAD_REQUEST, "invalid_request", "client_id and client_secret required"),
        },
        Some("refresh_token") => match field("refresh_token") {
            Some(t) => sts.refresh(t, now, &cid),
            None => return error(StatusCode::BAD_REQUEST, "invalid_request", "refresh_token required"),
        },
        Some(_) => return error(StatusCode::BAD_REQUEST, "unsupported_grant_type", "unsupported grant type"),
        None => return error(StatusCode::BAD_REQUEST, "invalid_request", "grant_type required"),
    };
    match result {
        Ok(pair) => pair_json(pair),
        Err(e) => sts_error(e),
    }
}

async fn introspect(
    State(sts): State<Arc<Sts>>,
    headers: HeaderMap,
    Form(form): Form<HashMap<String, String>>,
) -> Response {
    let cid = correlation_id(&headers);
    let Some(token) = form.get("token") else {
        return error(StatusCode::BAD_REQUEST, "invalid_request", "token required");
    };
    Json(sts.introspect(token, sts.clock().now(), &cid)).into_response()
}

async fn revoke(State(sts): State<Arc<Sts>>, headers: HeaderMap, Form(form): Form<HashMap<String, String>>) -> Response {
    let cid = correlation_id(&headers);
    if let Some(jti) = form.get("jti") {
        sts.revoke(jti, &cid);
        return Json(json!({"revoked": 1})).into_response();
    }
    if let Some(sub) = form.get("sub") {
        let n = sts.revoke_subject(sub, &cid);
        return Json(json!({"revoked": n})).into_response();
    }
    error(StatusCode::BAD_REQUEST, "invalid_request", "jti or sub required")
}

//! Mock resource servers that record every request they receive.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::response::Response;
use axum::Router;
use msag_core::audit::{Component, EventSink, LogEvent, Outcome, CORRELATION_HEADER};
use msag_core::SharedClock;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    /// Replies 200 with the request line and the identity headers it saw.
    EchoHeaders,
    FixedResponse { status: u16, body: serde_json::Value },
    /// Replies 500 to the first `n` requests, then echoes.
    FailNTimes { n: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(&name.to_ascii_lowercase()).map(String::as_str)
    }
}

pub struct MockUpstream {
    pub name: String,
    pub behavior: Behavior,
    requests: Mutex<Vec<RecordedRequest>>,
    calls: AtomicU32,
    sink: Arc<dyn EventSink>,
    clock: SharedClock,
}

impl std::fmt::Debug for MockUpstream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockUpstream")
            .field("name", &self.name)
            .field("behavior", &self.behavior)
            .finish_non_exhaustive()
    }
}

impl MockUpstream {
    pub fn new(name: &str, behavior: Behavior, sink: Arc<dyn EventSink>, clock: SharedClock) -> Arc<Self> {
        Arc::new(Self {
            name: name.to_owned(),
            behavior,
            requests: Mutex::new(Vec::new()),
            calls: AtomicU32::new(0),
            sink,
            clock,
        })
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().len()
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new().fallback(serve).with_state(self.clone())
    }

    fn reply(&self, req: &RecordedRequest, call: u32) -> (StatusCode, serde_json::Value) {
        let echo = || {
            json!({
                "service": self.name,
                "method": req.method,
                "path": req.path,
                "subject": req.header("x-subject"),
                "scopes": req.header("x-scopes"),
            })
        };
        match &self.behavior {
            Behavior::EchoHeaders => (StatusCode::OK, echo()),
            Behavior::FixedResponse { status, body } => {
                (StatusCode::from_u16(*status).unwrap_or(StatusCode::OK), body.clone())
            }
            Behavior::FailNTimes { n } if call < *n => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "simulated_failure", "call": call + 1}),
            ),
            Behavior::FailNTimes { .. } => (StatusCode::OK, echo()),
        }
    }
}

async fn serve(State(up): State<Arc<MockUpstream>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let body = to_bytes(body, 1 << 20).await.unwrap_or_default();
    let recorded = RecordedRequest {
        method: parts.method.to_string(),
        path: parts.uri.path_and_query().map(|p| p.as_str().to_owned()).unwrap_or_default(),
        headers: parts
            .headers
            .iter()
            .map(|(k, v)| (k.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
            .collect(),
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let call = up.calls.fetch_add(1, Ordering::SeqCst);
    let (status, payload) = up.reply(&recorded, call);
    let cid = recorded.header(CORRELATION_HEADER).unwrap_or_default().to_owned();
    let mut ev = LogEvent::new(
        up.clock.now_millis(),
        cid,
        Component::Upstream,
        "upstream.request",
        if status.is_server_error() { Outcome::Error } else { Outcome::Success },
    )
    .with("service", up.name.clone())
    .with("path", recorded.path.clone())
    .with("status", status.as_u16().to_string());
    if let Some(s) = recorded.header("x-subject") {
        ev = ev.subject(s);
    }
    up.requests.lock().push(recorded);
    up.sink.emit(ev);

    let mut resp = Response::new(Body::from(serde_json::to_vec(&payload).expect("json")));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert("content-type", "application/json".parse().expect("static header"));
    resp
}

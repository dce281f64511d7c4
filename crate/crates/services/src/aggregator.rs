//! Aggregator HTTP endpoint and the client-side sink that ships events to it.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use msag_core::audit::scrub::scrub;
use msag_core::audit::{Aggregator, EventFilter, EventSink, LogEvent};
use serde::Deserialize;
use tokio::sync::{mpsc, oneshot};

pub fn router(aggregator: Arc<Aggregator>) -> Router {
    Router::new()
        .route("/events", get(query).post(ingest))
        .route("/health", get(|| async { "ok" }))
        .with_state(aggregator)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Batch {
    One(Box<LogEvent>),
    Many(Vec<LogEvent>),
}

async fn ingest(State(agg): State<Arc<Aggregator>>, Json(batch): Json<Batch>) -> Response {
    let events = match batch {
        Batch::One(e) => vec![*e],
        Batch::Many(v) => v,
    };
    let n = events.len();
    for e in events {
        agg.emit(e);
    }
    (StatusCode::ACCEPTED, Json(serde_json::json!({"accepted": n}))).into_response()
}

async fn query(State(agg): State<Arc<Aggregator>>, Query(filter): Query<EventFilter>) -> Json<Vec<LogEvent>> {
    Json(agg.query(&filter))
}

enum Msg {
    Event(LogEvent),
    Flush(oneshot::Sender<()>),
}

/// Ships events to a remote aggregator in the background. Events that cannot
/// be delivered are appended to a local NDJSON fallback file.
#[derive(Debug, Clone)]
pub struct HttpSink {
    tx: mpsc::UnboundedSender<Msg>,
    fallback_writes: Arc<AtomicU64>,
}

impl std::fmt::Debug for Msg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Msg::Event(e) => write!(f, "Event({})", e.event_type),
            Msg::Flush(_) => f.write_str("Flush"),
        }
    }
}

impl HttpSink {
    /// Must be called inside a tokio runtime.
    pub fn spawn(aggregator_url: &str, fallback: PathBuf) -> Self {
        let (tx, mut rx) = mpsc::unbounded_channel::<Msg>();
        let url = format!("{}/events", aggregator_url.trim_end_matches('/'));
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(2))
            .build()
            .expect("http client");
        let fallback_writes = Arc::new(AtomicU64::new(0));
        let counter = fallback_writes.clone();
        tokio::spawn(async move {
            while let Some(first) = rx.recv().await {
                let mut batch = Vec::new();
                let mut waiters = Vec::new();
                let mut next = Some(first);
                while let Some(msg) = next {
                    match msg {
                        Msg::Event(e) => batch.push(scrub(e)),
                        Msg::Flush(done) => waiters.push(done),
                    }
                    next = rx.try_recv().ok();
                }
                if !batch.is_empty() {
                    let delivered = matches!(
                        client.post(&url).json(&batch).send().await,
                        Ok(r) if r.status().is_success()
                    );
                    if !delivered {
                        counter.fetch_add(batch.len() as u64, Ordering::Relaxed);
                        write_fallback(&fallback, &batch);
                    }
                }
                for w in waiters {
                    let _ = w.send(());
                }
            }
        });
        Self { tx, fallback_writes }
    }

    /// Waits until everything emitted so far was delivered or spilled.
    pub async fn flush(&self) {
        let (done, wait) = oneshot::channel();
        if self.tx.send(Msg::Flush(done)).is_ok() {
            let _ = wait.await;
        }
    }

    pub fn fallback_writes(&self) -> u64 {
        self.fallback_writes.load(Ordering::Relaxed)
    }
}

fn write_fallback(path: &PathBuf, events: &[LogEvent]) {
    let result = OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| {
        for e in events {
            let line = serde_json::to_string(e).expect("event serializes");
            writeln!(f, "{line}")?;
        }
        Ok(())
    });
    if let Err(e) = result {
        tracing::warn!(path = %path.display(), error = %e, "audit fallback write failed");
    }
}

impl EventSink for HttpSink {
    fn emit(&self, event: LogEvent) {
        let _ = self.tx.send(Msg::Event(event));
    }
}

/// Sends every event to each inner sink.
pub struct FanOut(pub Vec<Arc<dyn EventSink>>);

impl EventSink for FanOut {
    fn emit(&self, event: LogEvent) {
        if let Some((last, rest)) = self.0.split_last() {
            for s in rest {
                s.emit(event.clone());
            }
            last.emit(event);
        }
    }
}

//! Central audit log: a single event schema shared by every component,
//! correlation-id queries, circuit breakers and threshold anomaly rules.

mod aggregator;
pub mod anomaly;
pub mod breaker;
pub mod scrub;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use aggregator::{read_ndjson, Aggregator, EventFilter};
pub use anomaly::{AnomalyAction, AnomalyResponder, AnomalyRule, AnomalyScanner, TakenAction};
pub use breaker::{BreakerConfig, BreakerRegistry, BreakerState, CircuitState, CallOutcome};

pub const CORRELATION_HEADER: &str = "x-correlation-id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Sts,
    GatewayPublic,
    GatewayPrivate,
    Upstream,
    Harness,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Sts => "sts",
            Component::GatewayPublic => "gateway_public",
            Component::GatewayPrivate => "gateway_private",
            Component::Upstream => "upstream",
            Component::Harness => "harness",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| format!("unknown component {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Deny,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Epoch milliseconds.
    pub ts: i64,
    pub correlation_id: String,
    pub component: Component,
    pub event_type: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

impl LogEvent {
    pub fn new(
        ts: i64,
        correlation_id: impl Into<String>,
        component: Component,
        event_type: impl Into<String>,
        outcome: Outcome,
    ) -> Self {
        Self {
            ts,
            correlation_id: correlation_id.into(),
            component,
            event_type: event_type.into(),
            outcome,
            subject: None,
            detail: BTreeMap::new(),
        }
    }

    pub fn subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.detail.insert(key.into(), value.into());
        self
    }
}

/// Destination for audit events. Emission never fails the caller.
pub trait EventSink: Send + Sync {
    fn emit(&self, event: LogEvent);
}

impl<T: EventSink + ?Sized> EventSink for std::sync::Arc<T> {
    fn emit(&self, event: LogEvent) {
        (**self).emit(event)
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _event: LogEvent) {}
}

pub fn new_correlation_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

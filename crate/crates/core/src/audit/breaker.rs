//! Per-upstream circuit breakers.
//!
//! ```text
//! Closed ──[failure_threshold consecutive failures]──> Open
//! Open ──[cooldown elapsed, next call]──> HalfOpen
//! HalfOpen ──[probe_successes consecutive successes]──> Closed
//! HalfOpen ──[any failure]──> Open
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{Component, EventSink, LogEvent, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreakerConfig {
    pub failure_threshold: u32,
    /// Seconds an open breaker waits before admitting a probe.
    pub cooldown: i64,
    pub probe_successes: u32,
}

impl Default for BreakerConfig {
    fn default() -> Self {
        Self {
            failure_threshold: 5,
            cooldown: 10,
            probe_successes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitState {
    Closed,
    Open,
    HalfOpen,
}

impl CircuitState {
    pub fn as_str(self) -> &'static str {
        match self {
            CircuitState::Closed => "closed",
            CircuitState::Open => "open",
            CircuitState::HalfOpen => "half_open",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakerState {
    pub service: String,
    pub state: CircuitState,
    pub consecutive_failures: u32,
    /// Consecutive successful probes while half-open.
    pub probe_successes: u32,
    pub opened_at: i64,
    pub config: BreakerConfig,
}

impl BreakerState {
    pub fn new(service: impl Into<String>, config: BreakerConfig) -> Self {
        Self {
            service: service.into(),
            state: CircuitState::Closed,
            consecutive_failures: 0,
            probe_successes: 0,
            opened_at: 0,
            config,
        }
    }

    fn cooled_down(&self, now: i64) -> bool {
        now >= self.opened_at.saturating_add(self.config.cooldown)
    }

    fn trip(&mut self, now: i64) {
        self.state = CircuitState::Open;
        self.opened_at = now;
        self.probe_successes = 0;
    }

    /// Gate for the next call. An open breaker past its cooldown admits the
    /// call as a half-open probe.
    pub fn try_acquire(&mut self, now: i64) -> bool {
        match self.state {
            CircuitState::Closed | CircuitState::HalfOpen => true,
            CircuitState::Open if self.cooled_down(now) => {
                self.state = CircuitState::HalfOpen;
                self.probe_successes = 0;
                true
            }
            CircuitState::Open => false,
        }
    }

    pub fn record(&mut self, outcome: CallOutcome, now: i64) {
        if self.state == CircuitState::Open {
            if !self.cooled_down(now) {
                return;
            }
            self.state = CircuitState::HalfOpen;
            self.probe_successes = 0;
        }
        match (self.state, outcome) {
            (CircuitState::Closed, CallOutcome::Success) => self.consecutive_failures = 0,
            (CircuitState::Closed, CallOutcome::Failure) => {
                self.consecutive_failures += 1;
                if self.consecutive_failures >= self.config.failure_threshold {
                    self.trip(now);
                }
            }
            (CircuitState::HalfOpen, CallOutcome::Success) => {
                self.probe_successes += 1;
                if self.probe_successes >= self.config.probe_successes {
                    self.state = CircuitState::Closed;
                    self.consecutive_failures = 0;
                    self.probe_successes = 0;
                }
            }
            (CircuitState::HalfOpen, CallOutcome::Failure) => self.trip(now),
            (CircuitState::Open, _) => unreachable!("open handled above"),
        }
    }

    /// Operator-initiated trip.
    pub fn force_open(&mut self, now: i64) {
        self.trip(now);
    }
}

/// Breakers keyed by upstream id. Every state change is emitted as a
/// `breaker.<state>` event.
pub struct BreakerRegistry {
    config: BreakerConfig,
    breakers: Mutex<HashMap<String, BreakerState>>,
    sink: Arc<dyn EventSink>,
    component: Component,
}

impl std::fmt::Debug for BreakerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BreakerRegistry")
            .field("config", &self.config)
            .field("component", &self.component)
            .finish_non_exhaustive()
    }
}

impl BreakerRegistry {
    pub fn new(config: BreakerConfig, sink: Arc<dyn EventSink>, component: Component) -> Self {
        Self {
            config,
            breakers: Mutex::new(HashMap::new()),
            sink,
            component,
        }
    }

    pub fn config(&self) -> BreakerConfig {
        self.config
    }

    fn with_breaker<T>(
        &self,
        service: &str,
        now: i64,
        correlation_id: &str,
        f: impl FnOnce(&mut BreakerState) -> T,
    ) -> (T, BreakerState) {
        let mut map = self.breakers.lock();
        let breaker = map
            .entry(service.to_owned())
            .or_insert_with(|| BreakerState::new(service, self.config));
        let before = breaker.state;
        let out = f(breaker);
        let after = breaker.clone();
        drop(map);
        if before != after.state {
            let outcome = match after.state {
                CircuitState::Open => Outcome::Error,
                _ => Outcome::Success,
            };
            self.sink.emit(
                LogEvent::new(
                    now * 1000,
                    correlation_id,
                    self.component,
                    format!("breaker.{}", after.state.as_str()),
                    outcome,
                )
                .with("upstream", service)
                .with("from", before.as_str()),
            );
        }
        (out, after)
    }

    pub fn try_acquire(&self, service: &str, now: i64, correlation_id: &str) -> bool {
        self.with_breaker(service, now, correlation_id, |b| b.try_acquire(now)).0
    }

    pub fn record(&self, service: &str, outcome: CallOutcome, now: i64, correlation_id: &str) -> BreakerState {
        self.with_breaker(service, now, correlation_id, |b| b.record(outcome, now)).1
    }

    pub fn force_open(&self, service: &str, now: i64, correlation_id: &str) -> BreakerState {
        self.with_breaker(service, now, correlation_id, |b| b.force_open(now)).1
    }

    pub fn state(&self, service: &str) -> BreakerState {
        self.breakers
            .lock()
            .get(service)
            .cloned()
            .unwrap_or_else(|| BreakerState::new(service, self.config))
    }

    pub fn snapshot(&self) -> Vec<BreakerState> {
        let mut v: Vec<_> = self.breakers.lock().values().cloned().collect();
        v.sort_by(|a, b| a.service.cmp(&b.service));
        v
    }
}

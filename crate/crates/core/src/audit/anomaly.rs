//! Threshold rules over the central log.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Aggregator, Component, EventSink, LogEvent, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyAction {
    Alert,
    OpenBreaker,
    RevokeSubject,
}

impl AnomalyAction {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyAction::Alert => "alert",
            AnomalyAction::OpenBreaker => "open_breaker",
            AnomalyAction::RevokeSubject => "revoke_subject",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyRule {
    /// Window length in seconds.
    pub window: i64,
    pub event_type: String,
    pub threshold: u32,
    pub action: AnomalyAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("anomaly rule for {0}: threshold must be at least 1")]
    ZeroThreshold(String),
    #[error("anomaly rule for {0}: window must be positive")]
    EmptyWindow(String),
}

impl AnomalyRule {
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.threshold < 1 {
            return Err(RuleError::ZeroThreshold(self.event_type.clone()));
        }
        if self.window <= 0 {
            return Err(RuleError::EmptyWindow(self.event_type.clone()));
        }
        Ok(())
    }

    /// Events are counted per group: per subject for revocation, per
    /// upstream for breakers, globally for alerts.
    fn group_key(&self, ev: &LogEvent) -> Option<Option<String>> {
        match self.action {
            AnomalyAction::Alert => Some(None),
            AnomalyAction::RevokeSubject => ev.subject.clone().map(Some),
            AnomalyAction::OpenBreaker => ev.detail.get("upstream").cloned().map(Some),
        }
    }
}

/// Side effects an anomaly can trigger.
pub trait AnomalyResponder: Send + Sync {
    /// Revokes every live token of `subject`; returns how many were revoked.
    fn revoke_subject(&self, subject: &str) -> usize;
    fn open_breaker(&self, upstream: &str, now: i64);
}

/// Responder that only records alerts.
#[derive(Debug, Default)]
pub struct AlertOnly;

impl AnomalyResponder for AlertOnly {
    fn revoke_subject(&self, _subject: &str) -> usize {
        0
    }

    fn open_breaker(&self, _upstream: &str, _now: i64) {}
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TakenAction {
    pub rule: usize,
    pub action: AnomalyAction,
    pub event_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub count: usize,
}

#[derive(Debug)]
pub struct AnomalyScanner {
    rules: Vec<AnomalyRule>,
    component: Component,
    last_fired: HashMap<(usize, Option<String>), i64>,
}

impl AnomalyScanner {
    pub fn new(rules: Vec<AnomalyRule>, component: Component) -> Result<Self, RuleError> {
        for r in &rules {
            r.validate()?;
        }
        Ok(Self {
            rules,
            component,
            last_fired: HashMap::new(),
        })
    }

    pub fn rules(&self) -> &[AnomalyRule] {
        &self.rules
    }

    /// Counts each rule's events in `[now - window, now]` (seconds) and
    /// fires its action at most once per window per group.
    pub fn scan(
        &mut self,
        log: &Aggregator,
        now: i64,
        responder: &dyn AnomalyResponder,
    ) -> Vec<TakenAction> {
        let mut taken = Vec::new();
        for (idx, rule) in self.rules.iter().enumerate() {
            let from = (now - rule.window) * 1000;
            let to = now * 1000 + 999;
            let mut counts: BTreeMap<Option<String>, usize> = BTreeMap::new();
            let mut correlation: BTreeMap<Option<String>, String> = BTreeMap::new();
            for ev in log.query(&super::EventFilter {
                event_type: Some(rule.event_type.clone()),
                from: Some(from),
                to: Some(to),
                ..Default::default()
            }) {
                if let Some(key) = rule.group_key(&ev) {
                    *counts.entry(key.clone()).or_default() += 1;
                    correlation.insert(key, ev.correlation_id);
                }
            }
            for (key, count) in counts {
                if count < rule.threshold as usize {
                    continue;
                }
                let slot = (idx, key.clone());
                if self.last_fired.get(&slot).is_some_and(|&t| now - t < rule.window) {
                    continue;
                }
                self.last_fired.insert(slot, now);
                let mut revoked = None;
                match (rule.action, key.as_deref()) {
                    (AnomalyAction::RevokeSubject, Some(subject)) => {
                        revoked = Some(responder.revoke_subject(subject));
                    }
                    (AnomalyAction::OpenBreaker, Some(upstream)) => responder.open_breaker(upstream, now),
                    _ => {}
                }
                let mut ev = LogEvent::new(
                    now * 1000,
                    correlation.get(&key).cloned().unwrap_or_default(),
                    self.component,
                    "anomaly.triggered",
                    Outcome::Deny,
                )
                .with("rule", idx.to_string())
                .with("action", rule.action.as_str())
                .with("watched", rule.event_type.clone())
                .with("count", count.to_string());
                if let Some(k) = &key {
                    ev = ev.with("target", k.clone());
                    if rule.action == AnomalyAction::RevokeSubject {
                        ev.subject = Some(k.clone());
                    }
                }
                if let Some(n) = revoked {
                    ev = ev.with("revoked", n.to_string());
                }
                log.emit(ev);
                taken.push(TakenAction {
                    rule: idx,
                    action: rule.action,
                    event_type: rule.event_type.clone(),
                    target: key,
                    count,
                });
            }
        }
        taken
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use parking_lot::Mutex;

    #[derive(Default)]
    struct Recorder {
        revoked: Mutex<Vec<String>>,
        opened: Mutex<Vec<String>>,
    }

    impl AnomalyResponder for Recorder {
        fn revoke_subject(&self, subject: &str) -> usize {
            self.revoked.lock().push(subject.to_owned());
            1
        }

        fn open_breaker(&self, upstream: &str, _now: i64) {
            self.opened.lock().push(upstream.to_owned());
        }
    }

    fn failures(log: &Aggregator, n: usize, start_secs: i64) {
        for i in 0..n {
            log.emit(LogEvent::new(
                (start_secs + i as i64) * 1000,
                format!("c{i}"),
                Component::Sts,
                "auth.failure",
                Outcome::Deny,
            ));
        }
    }

    fn alert_rule(threshold: u32) -> AnomalyRule {
        AnomalyRule {
            window: 60,
            event_type: "auth.failure".into(),
            threshold,
            action: AnomalyAction::Alert,
        }
    }

    #[test]
    fn ten_failures_in_a_minute_raise_an_alert() {
        let log = Aggregator::in_memory();
        failures(&log, 10, 1_000);
        let mut scanner = AnomalyScanner::new(vec![alert_rule(10)], Component::Harness).unwrap();
        let taken = scanner.scan(&log, 1_030, &AlertOnly);
        assert_eq!(taken.len(), 1);
        assert_eq!(taken[0].count, 10);
        assert_eq!(log.query(&crate::audit::EventFilter::event_type("anomaly.triggered")).len(), 1);
    }

    #[test]
    fn nine_failures_do_nothing() {
        let log = Aggregator::in_memory();
        failures(&log, 9, 1_000);
        let mut scanner = AnomalyScanner::new(vec![alert_rule(10)], Component::Harness).unwrap();
        assert!(scanner.scan(&log, 1_030, &AlertOnly).is_empty());
    }

    #[test]
    fn fires_once_per_window() {
        let log = Aggregator::in_memory();
        failures(&log, 10, 1_000);
        let mut scanner = AnomalyScanner::new(vec![alert_rule(10)], Component::Harness).unwrap();
        assert_eq!(scanner.scan(&log, 1_010, &AlertOnly).len(), 1);
        assert!(scanner.scan(&log, 1_020, &AlertOnly).is_empty());
        failures(&log, 10, 1_065);
        assert_eq!(scanner.scan(&log, 1_075, &AlertOnly).len(), 1);
    }

    #[test]
    fn events_outside_window_are_ignored() {
        let log = Aggregator::in_memory();
        failures(&log, 10, 0);
        let mut scanner = AnomalyScanner::new(vec![alert_rule(10)], Component::Harness).unwrap();
        assert!(scanner.scan(&log, 200, &AlertOnly).is_empty());
    }

    #[test]
    fn revoke_subject_targets_the_offender() {
        let log = Aggregator::in_memory();
        log.emit(LogEvent::new(1_000, "c", Component::Sts, "token.reuse", Outcome::Deny).subject("mallory"));
        log.emit(LogEvent::new(1_000, "d", Component::Sts, "token.refreshed", Outcome::Success).subject("alice"));
        let rule = AnomalyRule {
            window: 60,
            event_type: "token.reuse".into(),
            threshold: 1,
            action: AnomalyAction::RevokeSubject,
        };
        let rec = Recorder::default();
        let mut scanner = AnomalyScanner::new(vec![rule], Component::Harness).unwrap();
        let taken = scanner.scan(&log, 1, &rec);
        assert_eq!(taken[0].target.as_deref(), Some("mallory"));
        assert_eq!(*rec.revoked.lock(), ["mallory"]);
    }

    #[test]
    fn open_breaker_groups_by_upstream() {
        let log = Aggregator::in_memory();
        for up in ["a", "a", "b"] {
            log.emit(
                LogEvent::new(0, "c", Component::GatewayPublic, "gateway.upstream_error", Outcome::Error)
                    .with("upstream", up),
            );
        }
        let rule = AnomalyRule {
            window: 10,
            event_type: "gateway.upstream_error".into(),
            threshold: 2,
            action: AnomalyAction::OpenBreaker,
        };
        let rec = Recorder::default();
        let mut scanner = AnomalyScanner::new(vec![rule], Component::Harness).unwrap();
        scanner.scan(&log, 0, &rec);
        assert_eq!(*rec.opened.lock(), ["a"]);
    }

    #[test]
    fn zero_threshold_is_rejected() {
        assert!(AnomalyScanner::new(vec![alert_rule(0)], Component::Harness).is_err());
    }
}

//! Time sources.
//!
//! Every component reads time through a [`Clock`] so the scenario harness can
//! drive token expiry and key rotation on a virtual timeline.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync + std::fmt::Debug {
    /// Seconds since the Unix epoch.
    fn now(&self) -> i64;

    /// Milliseconds since the Unix epoch.
    fn now_millis(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        self.now_millis() / 1000
    }

    fn now_millis(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or_default()
    }
}

/// Monotonic virtual clock shared by clones.
#[derive(Debug, Clone)]
pub struct SimClock {
    millis: Arc<AtomicI64>,
}

impl SimClock {
    pub fn new(start_secs: i64) -> Self {
        Self {
            millis: Arc::new(AtomicI64::new(start_secs * 1000)),
        }
    }

    /// Moves the clock forward. Negative deltas are ignored.
    pub fn advance(&self, delta_secs: i64) {
        self.advance_millis(delta_secs.saturating_mul(1000));
    }

    pub fn advance_millis(&self, delta_millis: i64) {
        if delta_millis > 0 {
            self.millis.fetch_add(delta_millis, Ordering::SeqCst);
        }
    }
}

impl Clock for SimClock {
    fn now(&self) -> i64 {
        self.now_millis().div_euclid(1000)
    }

    fn now_millis(&self) -> i64 {
        self.millis.load(Ordering::SeqCst)
    }
}

pub type SharedClock = Arc<dyn Clock>;

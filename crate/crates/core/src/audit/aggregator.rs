use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{scrub::scrub, Component, EventSink, LogEvent};

/// Query filter; unset fields match everything. `from`/`to` are inclusive
/// epoch milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<i64>,
}

impl EventFilter {
    pub fn correlation(id: impl Into<String>) -> Self {
        Self {
            correlation_id: Some(id.into()),
            ..Self::default()
        }
    }

    pub fn event_type(ty: impl Into<String>) -> Self {
        Self {
            event_type: Some(ty.into()),
            ..Self::default()
        }
    }

    pub fn matches(&self, ev: &LogEvent) -> bool {
        self.correlation_id.as_ref().is_none_or(|c| *c == ev.correlation_id)
            && self.component.is_none_or(|c| c == ev.component)
            && self.event_type.as_ref().is_none_or(|t| *t == ev.event_type)
            && self.subject.as_ref().is_none_or(|s| ev.subject.as_ref() == Some(s))
            && self.from.is_none_or(|f| ev.ts >= f)
            && self.to.is_none_or(|t| ev.ts <= t)
    }
}

struct Inner {
    events: Vec<LogEvent>,
    sink: Option<BufWriter<File>>,
}

/// In-memory event store with an optional NDJSON sink. Appends are
/// serialized, so arrival order is the stored order.
pub struct Aggregator {
    inner: Mutex<Inner>,
    sink_path: Option<PathBuf>,
    dropped: AtomicU64,
}

impl std::fmt::Debug for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Aggregator")
            .field("events", &self.len())
            .field("sink", &self.sink_path)
            .field("dropped", &self.dropped())
            .finish()
    }
}

impl Default for Aggregator {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Aggregator {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner { events: Vec::new(), sink: None }),
            sink_path: None,
            dropped: AtomicU64::new(0),
        }
    }

    /// Appends to the NDJSON file at `path`, creating it if needed.
    pub fn with_sink(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                events: Vec::new(),
                sink: Some(BufWriter::new(file)),
            }),
            sink_path: Some(path),
            dropped: AtomicU64::new(0),
        })
    }

    pub fn sink_path(&self) -> Option<&Path> {
        self.sink_path.as_deref()
    }

    /// Events that could not be written to the sink.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self, filter: &EventFilter) -> Vec<LogEvent> {
        self.inner
            .lock()
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn all(&self) -> Vec<LogEvent> {
        self.inner.lock().events.clone()
    }

    /// Counts events of one type with `ts` in `[from, to]`, optionally grouped.
    pub fn count_in_window(&self, event_type: &str, from: i64, to: i64) -> usize {
        self.inner
            .lock()
            .events
            .iter()
            .filter(|e| e.event_type == event_type && e.ts >= from && e.ts <= to)
            .count()
    }

    pub fn flush(&self) -> io::Result<()> {
        match self.inner.lock().sink.as_mut() {
            Some(w) => w.flush(),
            None => Ok(()),
        }
    }
}

impl EventSink for Aggregator {
    fn emit(&self, event: LogEvent) {
        let event = scrub(event);
        let mut inner = self.inner.lock();
        if let Some(w) = inner.sink.as_mut() {
            let line = serde_json::to_string(&event).expect("events serialize");
            let written = writeln!(w, "{line}").and_then(|_| w.flush());
            if written.is_err() {
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        inner.events.push(event);
    }
}

/// Reads an NDJSON sink. Unparseable lines are skipped and counted.
pub fn read_ndjson(path: &Path) -> io::Result<(Vec<LogEvent>, usize)> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut bad = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(ev) => events.push(ev),
            Err(_) => bad += 1,
        }
    }
    Ok((events, bad))
}

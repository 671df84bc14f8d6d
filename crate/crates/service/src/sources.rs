//! External data sources: sensors polled on an interval and clients that
//! push payloads. Accepted payloads become engine messages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};
use urgentflow::engine::{Engine, EngineError, ORIGIN_EXTERNAL};
use urgentflow::{IncidentId, MessageId};

/// Longest back-off a failing POLL source can reach.
pub const DEFAULT_MAX_BACKOFF: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceMode {
    Poll,
    Push,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub source_id: String,
    pub mode: SourceMode,
    /// Seconds between polls. POLL sources only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_interval: Option<f64>,
    /// POLL: what the fetcher reads. PUSH: informational route token.
    #[serde(default)]
    pub endpoint: String,
    pub target_queue: String,
    /// Incident whose queue receives the payloads.
    pub incident_id: IncidentId,
    /// JSON field whose value suppresses repeats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_key: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("invalid data source: {0}")]
    Invalid(String),
    #[error("data source `{0}` already exists")]
    Duplicate(String),
    #[error("unknown data source `{0}`")]
    UnknownSource(String),
    #[error("data source `{0}` does not accept pushes")]
    NotPush(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Reads whatever new payloads a POLL source has.
pub trait Fetcher: Send + Sync {
    fn fetch(&self, source: &DataSource) -> Result<Vec<Vec<u8>>, String>;
}

impl<F: Fetcher + ?Sized> Fetcher for Arc<F> {
    fn fetch(&self, source: &DataSource) -> Result<Vec<Vec<u8>>, String> {
        (**self).fetch(source)
    }
}

/// Treats `endpoint` as a file path; every line appended since the last
/// fetch is one payload. Blank lines are skipped.
#[derive(Default)]
pub struct FileFetcher {
    offsets: Mutex<HashMap<String, u64>>,
}

impl Fetcher for FileFetcher {
    fn fetch(&self, source: &DataSource) -> Result<Vec<Vec<u8>>, String> {
        let path = PathBuf::from(&source.endpoint);
        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut offsets = self.offsets.lock().unwrap_or_else(|e| e.into_inner());
        let start = offsets.get(&source.source_id).copied().unwrap_or(0) as usize;
        let start = if start > bytes.len() { 0 } else { start };
        // only consume complete lines
        let end = match bytes[start..].iter().rposition(|&b| b == b'\n') {
            Some(i) => start + i + 1,
            None => start,
        };
        offsets.insert(source.source_id.clone(), end as u64);
        Ok(bytes[start..end]
            .split(|&b| b == b'\n')
            .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
            .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
            .map(<[u8]>::to_vec)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Triggered {
    pub source_id: String,
    pub message_id: MessageId,
}

struct Entry {
    source: DataSource,
    next_due: Duration,
    backoff: Duration,
    failures: u32,
    seen: HashSet<String>,
}

/// Registered sources plus their poll schedule and dedup memory.
pub struct SourceRegistry {
    engine: Arc<Engine>,
    fetcher: Box<dyn Fetcher>,
    max_backoff: Duration,
    sources: Mutex<BTreeMap<String, Entry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceStatus {
    #[serde(flatten)]
    pub source: DataSource,
    pub next_due: f64,
    pub consecutive_failures: u32,
}

impl SourceRegistry {
    pub fn new(engine: Arc<Engine>, fetcher: Box<dyn Fetcher>) -> Self {
        Self {
            engine,
            fetcher,
            max_backoff: DEFAULT_MAX_BACKOFF,
            sources: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_max_backoff(mut self, cap: Duration) -> Self {
        self.max_backoff = cap;
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Entry>> {
        self.sources.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Adds a source; a POLL source is first due at `now`.
    pub fn register(&self, source: DataSource, now: Duration) -> Result<(), SourceError> {
        if source.source_id.trim().is_empty() {
            return Err(SourceError::Invalid("source_id is empty".into()));
        }
        let interval = match (source.mode, source.poll_interval) {
            (SourceMode::Poll, Some(s)) if s.is_finite() && s > 0.0 => Duration::from_secs_f64(s),
            (SourceMode::Poll, _) => {
                return Err(SourceError::Invalid("POLL sources need poll_interval > 0".into()))
            }
            (SourceMode::Push, None) => Duration::ZERO,
            (SourceMode::Push, Some(_)) => {
                return Err(SourceError::Invalid("PUSH sources take no poll_interval".into()))
            }
        };
        if source.mode == SourceMode::Poll && source.endpoint.is_empty() {
            return Err(SourceError::Invalid("POLL sources need an endpoint".into()));
        }
        if !self.engine.queue_registered(&source.target_queue) {
            return Err(SourceError::Invalid(format!(
                "queue `{}` is not bound in any registered workflow kind",
                source.target_queue
            )));
        }
        if !self.engine.queue_bound(&source.incident_id, &source.target_queue)? {
            return Err(SourceError::Invalid(format!(
                "queue `{}` is not bound for incident `{}`",
                source.target_queue, source.incident_id
            )));
        }
        let mut sources = self.lock();
        if sources.contains_key(&source.source_id) {
            return Err(SourceError::Duplicate(source.source_id));
        }
        sources.insert(
            source.source_id.clone(),
            Entry {
                source,
                next_due: now,
                backoff: interval,
                failures: 0,
                seen: HashSet::new(),
            },
        );
        Ok(())
    }

    pub fn remove(&self, source_id: &str) -> Result<DataSource, SourceError> {
        self.lock()
            .remove(source_id)
            .map(|e| e.source)
            .ok_or_else(|| SourceError::UnknownSource(source_id.to_string()))
    }

    pub fn list(&self) -> Vec<SourceStatus> {
        self.lock()
            .values()
            .map(|e| SourceStatus {
                source: e.source.clone(),
                next_due: e.next_due.as_secs_f64(),
                consecutive_failures: e.failures,
            })
            .collect()
    }

    /// Accepts one pushed payload. `Ok(None)` means it repeated a dedup
    /// value already seen and was dropped.
    pub fn push(&self, source_id: &str, payload: Vec<u8>) -> Result<Option<MessageId>, SourceError> {
        let mut sources = self.lock();
        let entry = sources
            .get_mut(source_id)
            .ok_or_else(|| SourceError::UnknownSource(source_id.to_string()))?;
        if entry.source.mode != SourceMode::Push {
            return Err(SourceError::NotPush(source_id.to_string()));
        }
        Ok(deliver(&self.engine, entry, payload)?)
    }

    /// Fetches every POLL source due at `now`, in source id order.
    pub fn poll_sources(&self, now: Duration) -> Vec<Triggered> {
        let mut out = Vec::new();
        let mut sources = self.lock();
        for entry in sources.values_mut() {
            if entry.source.mode != SourceMode::Poll || entry.next_due > now {
                continue;
            }
            let interval = Duration::from_secs_f64(entry.source.poll_interval.unwrap_or(1.0));
            match self.fetcher.fetch(&entry.source) {
                Ok(payloads) => {
                    entry.failures = 0;
                    entry.backoff = interval;
                    entry.next_due = now + interval;
                    for p in payloads {
                        match deliver(&self.engine, entry, p) {
                            Ok(Some(message_id)) => out.push(Triggered {
                                source_id: entry.source.source_id.clone(),
                                message_id,
                            }),
                            Ok(None) => {}
                            Err(e) => warn!(source = %entry.source.source_id, error = %e, "payload not delivered"),
                        }
                    }
                }
                Err(e) => {
                    entry.failures += 1;
                    entry.backoff = (entry.backoff * 2).min(self.max_backoff.max(interval));
                    entry.next_due = now + entry.backoff;
                    warn!(
                        source = %entry.source.source_id,
                        error = %e,
                        retry_in = entry.backoff.as_secs_f64(),
                        "fetch failed"
                    );
                }
            }
        }
        out
    }

    /// Earliest time any POLL source is due.
    pub fn next_due(&self) -> Option<Duration> {
        self.lock()
            .values()
            .filter(|e| e.source.mode == SourceMode::Poll)
            .map(|e| e.next_due)
            .min()
    }
}

fn dedup_value(key: &str, payload: &[u8]) -> Option<String> {
    let v: serde_json::Value = serde_json::from_slice(payload).ok()?;
    v.get(key).map(|f| match f {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    })
}

fn deliver(engine: &Engine, entry: &mut Entry, payload: Vec<u8>) -> Result<Option<MessageId>, EngineError> {
    let key = match &entry.source.dedup_key {
        Some(k) => dedup_value(k, &payload),
        None => None,
    };
    if let Some(k) = &key {
        if entry.seen.contains(k) {
            debug!(source = %entry.source.source_id, value = %k, "duplicate payload dropped");
            return Ok(None);
        }
    }
    let id = engine.send_message(&entry.source.target_queue, &entry.source.incident_id, payload, ORIGIN_EXTERNAL)?;
    if let Some(k) = key {
        entry.seen.insert(k);
    }
    Ok(Some(id))
}

/// Source of "now" for registration and polling. The service uses the
/// wall clock; tests bind it to the testbed's virtual clock.
pub type Clock = Arc<dyn Fn() -> Duration + Send + Sync>;

/// Seconds since the call, on the wall clock.
pub fn wall_clock() -> Clock {
    let origin = std::time::Instant::now();
    Arc::new(move || origin.elapsed())
}

/// Polls every `tick` until the task is aborted.
pub fn spawn_poller(registry: Arc<SourceRegistry>, clock: Clock, tick: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(tick);
        loop {
            interval.tick().await;
            let now = clock();
            let reg = Arc::clone(&registry);
            match tokio::task::spawn_blocking(move || reg.poll_sources(now)).await {
                Ok(t) if !t.is_empty() => debug!(count = t.len(), "poll delivered messages"),
                Ok(_) => {}
                Err(e) => warn!(error = %e, "poll task failed"),
            }
        }
    })
}

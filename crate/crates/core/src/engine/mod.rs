//! The workflow manager: incidents whose lifetimes are expressed as stages
//! bound to message queues.
//!
//! Every queue is per incident. A message sent to `(incident, queue)` runs
//! the bound stage handler exactly once; messages on the same lane run one
//! at a time in `enqueue_seq` order, while different lanes may run
//! concurrently. Dispatch happens either on the caller's thread
//! ([`Engine::run_pending`]) or on a pool of worker threads
//! ([`Engine::start_workers`]).
//!
//! State changes are recorded as events. With a store attached each event
//! is appended to the store file before it is applied, so reopening the
//! store rebuilds identical state and re-queues messages that had not
//! started.

mod manifest;
mod store;

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::error::Error as StdError;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock, Weak};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{error, info, warn};

pub use manifest::{parse_manifest, HandlerRegistry, KindManifest, ManifestError, StageDecl};
pub use store::StoreError;
use store::{Record, Snapshot, Store};

use crate::ids::{DataId, IncidentId, MessageId, SimId};

pub type HandlerResult = Result<(), Box<dyn StdError + Send + Sync>>;
pub type StageHandler = Arc<dyn Fn(&StageContext<'_>) -> HandlerResult + Send + Sync>;

pub const ORIGIN_SYSTEM: &str = "system";
pub const ORIGIN_EXTERNAL: &str = "external";

#[derive(Clone)]
pub struct WorkflowStage {
    pub stage_name: String,
    pub queue_name: String,
    pub handler: StageHandler,
}

impl WorkflowStage {
    pub fn new<F>(stage_name: impl Into<String>, queue_name: impl Into<String>, handler: F) -> Self
    where
        F: Fn(&StageContext<'_>) -> HandlerResult + Send + Sync + 'static,
    {
        Self {
            stage_name: stage_name.into(),
            queue_name: queue_name.into(),
            handler: Arc::new(handler),
        }
    }
}

impl fmt::Debug for WorkflowStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkflowStage")
            .field("stage_name", &self.stage_name)
            .field("queue_name", &self.queue_name)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowKind {
    pub name: String,
    pub stages: Vec<WorkflowStage>,
    pub entry_queue: String,
}

impl WorkflowKind {
    pub fn new(name: impl Into<String>, stages: Vec<WorkflowStage>, entry_queue: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            stages,
            entry_queue: entry_queue.into(),
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        for (i, stage) in self.stages.iter().enumerate() {
            if self.stages[..i].iter().any(|s| s.queue_name == stage.queue_name) {
                return Err(EngineError::DuplicateQueueName(stage.queue_name.clone()));
            }
            if self.stages[..i].iter().any(|s| s.stage_name == stage.stage_name) {
                return Err(EngineError::DuplicateStageName(stage.stage_name.clone()));
            }
        }
        if !self.stages.iter().any(|s| s.queue_name == self.entry_queue) {
            return Err(EngineError::UnknownEntryQueue(self.entry_queue.clone()));
        }
        Ok(())
    }

    fn stage_for_queue(&self, queue: &str) -> Option<&WorkflowStage> {
        self.stages.iter().find(|s| s.queue_name == queue)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IncidentState {
    Pending,
    Active,
    Complete,
    Cancelled,
}

impl IncidentState {
    pub fn is_terminal(self) -> bool {
        matches!(self, IncidentState::Complete | IncidentState::Cancelled)
    }
}

impl fmt::Display for IncidentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IncidentState::Pending => "PENDING",
            IncidentState::Active => "ACTIVE",
            IncidentState::Complete => "COMPLETE",
            IncidentState::Cancelled => "CANCELLED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub incident_id: IncidentId,
    pub name: String,
    pub kind: String,
    pub state: IncidentState,
    pub created_at: DateTime<Utc>,
    /// queue name -> stage name
    pub stage_bindings: BTreeMap<String, String>,
    pub associated_simulation_ids: Vec<SimId>,
    pub associated_data_ids: Vec<DataId>,
    #[serde(with = "b64_map")]
    pub kv_store: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: MessageId,
    pub queue_name: String,
    pub incident_id: IncidentId,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub originator: String,
    pub enqueue_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageStatus {
    Queued,
    Running,
    Completed,
    Failed { error: String },
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub message: Message,
    #[serde(flatten)]
    pub status: MessageStatus,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("workflow kind `{0}` is already registered")]
    DuplicateKind(String),
    #[error("queue `{0}` is bound to more than one stage")]
    DuplicateQueueName(String),
    #[error("stage name `{0}` is used more than once")]
    DuplicateStageName(String),
    #[error("entry queue `{0}` is not bound to any stage")]
    UnknownEntryQueue(String),
    #[error("unknown workflow kind `{0}`")]
    UnknownKind(String),
    #[error("unknown incident `{0}`")]
    UnknownIncident(IncidentId),
    #[error("incident `{incident}` cannot go from {from} to {to}")]
    InvalidStateTransition {
        incident: IncidentId,
        from: IncidentState,
        to: IncidentState,
    },
    #[error("queue `{queue}` is not bound for incident `{incident}`")]
    UnknownQueue { incident: IncidentId, queue: String },
    #[error("incident `{0}` is not active")]
    IncidentNotActive(IncidentId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Receives lifecycle notifications the engine cannot act on itself.
pub trait IncidentObserver: Send + Sync {
    fn incident_cancelled(&self, incident: &IncidentId);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub(crate) enum EngineEvent {
    IncidentCreated {
        incident_id: IncidentId,
        name: String,
        kind: String,
        created_at: DateTime<Utc>,
        stage_bindings: BTreeMap<String, String>,
    },
    IncidentState {
        incident_id: IncidentId,
        state: IncidentState,
    },
    MessageEnqueued {
        message: Message,
    },
    MessageStarted {
        message_id: MessageId,
    },
    MessageFinished {
        message_id: MessageId,
        error: Option<String>,
    },
    KvPut {
        incident_id: IncidentId,
        key: String,
        #[serde(with = "b64")]
        value: Vec<u8>,
    },
    SimulationLinked {
        incident_id: IncidentId,
        sim_id: SimId,
    },
    DataLinked {
        incident_id: IncidentId,
        data_id: DataId,
    },
    DataUnlinked {
        incident_id: IncidentId,
        data_id: DataId,
    },
}

type LaneKey = (IncidentId, String);

#[derive(Default)]
struct Lane {
    queue: VecDeque<MessageId>,
    busy: bool,
    next_seq: u64,
}

#[derive(Default)]
struct EngineState {
    incidents: BTreeMap<IncidentId, Incident>,
    messages: BTreeMap<MessageId, MessageRecord>,
    lanes: BTreeMap<LaneKey, Lane>,
    next_incident: u64,
    next_message: u64,
    queued: usize,
    in_flight: usize,
    store: Option<Store>,
}

impl EngineState {
    /// Persist then apply. A store failure leaves state untouched.
    fn commit(&mut self, event: EngineEvent) -> Result<(), EngineError> {
        if let Some(store) = self.store.as_mut() {
            store.append(&event)?;
        }
        self.apply(event);
        Ok(())
    }

    /// Dispatcher bookkeeping must proceed even when the store is failing.
    fn commit_or_log(&mut self, event: EngineEvent) {
        if let Some(store) = self.store.as_mut() {
            if let Err(e) = store.append(&event) {
                error!(error = %e, "could not persist dispatcher event");
            }
        }
        self.apply(event);
    }

    fn apply(&mut self, event: EngineEvent) {
        match event {
            EngineEvent::IncidentCreated {
                incident_id,
                name,
                kind,
                created_at,
                stage_bindings,
            } => {
                self.next_incident += 1;
                self.incidents.insert(
                    incident_id.clone(),
                    Incident {
                        incident_id,
                        name,
                        kind,
                        state: IncidentState::Pending,
                        created_at,
                        stage_bindings,
                        associated_simulation_ids: Vec::new(),
                        associated_data_ids: Vec::new(),
                        kv_store: BTreeMap::new(),
                    },
                );
            }
            EngineEvent::IncidentState { incident_id, state } => {
                if let Some(inc) = self.incidents.get_mut(&incident_id) {
                    inc.state = state;
                }
                if state.is_terminal() {
                    let keys: Vec<LaneKey> = self
                        .lanes
                        .range((incident_id.clone(), String::new())..)
                        .take_while(|((inc, _), _)| *inc == incident_id)
                        .map(|(k, _)| k.clone())
                        .collect();
                    for key in keys {
                        let lane = self.lanes.get_mut(&key).expect("lane exists");
                        let dropped: Vec<MessageId> = lane.queue.drain(..).collect();
                        self.queued -= dropped.len();
                        for id in dropped {
                            if let Some(rec) = self.messages.get_mut(&id) {
                                rec.status = MessageStatus::Discarded;
                            }
                        }
                    }
                }
            }
            EngineEvent::MessageEnqueued { message } => {
                let id = message.message_id;
                self.next_message = self.next_message.max(id.0 + 1);
                let lane = self
                    .lanes
                    .entry((message.incident_id.clone(), message.queue_name.clone()))
                    .or_default();
                lane.next_seq = lane.next_seq.max(message.enqueue_seq + 1);
                lane.queue.push_back(id);
                self.queued += 1;
                self.messages.insert(
                    id,
                    MessageRecord {
                        message,
                        status: MessageStatus::Queued,
                    },
                );
            }
            EngineEvent::MessageStarted { message_id } => {
                let rec = self.messages.get_mut(&message_id).expect("started message exists");
                rec.status = MessageStatus::Running;
                let key = (rec.message.incident_id.clone(), rec.message.queue_name.clone());
                let lane = self.lanes.get_mut(&key).expect("lane exists");
                let head = lane.queue.pop_front();
                debug_assert_eq!(head, Some(message_id), "dispatch must take the lane head");
                lane.busy = true;
                self.queued -= 1;
                self.in_flight += 1;
            }
            EngineEvent::MessageFinished { message_id, error } => {
                let rec = self.messages.get_mut(&message_id).expect("finished message exists");
                rec.status = match error {
                    None => MessageStatus::Completed,
                    Some(error) => MessageStatus::Failed { error },
                };
                let key = (rec.message.incident_id.clone(), rec.message.queue_name.clone());
                if let Some(lane) = self.lanes.get_mut(&key) {
                    lane.busy = false;
                }
                self.in_flight -= 1;
            }
            EngineEvent::KvPut {
                incident_id,
                key,
                value,
            } => {
                if let Some(inc) = self.incidents.get_mut(&incident_id) {
                    inc.kv_store.insert(key, value);
                }
            }
            EngineEvent::SimulationLinked { incident_id, sim_id } => {
                if let Some(inc) = self.incidents.get_mut(&incident_id) {
                    inc.associated_simulation_ids.push(sim_id);
                }
            }
            EngineEvent::DataLinked { incident_id, data_id } => {
                if let Some(inc) = self.incidents.get_mut(&incident_id) {
                    inc.associated_data_ids.push(data_id);
                }
            }
            EngineEvent::DataUnlinked { incident_id, data_id } => {
                if let Some(inc) = self.incidents.get_mut(&incident_id) {
                    inc.associated_data_ids.retain(|d| *d != data_id);
                }
            }
        }
    }

    fn restore(&mut self, snapshot: Snapshot) {
        self.incidents = snapshot
            .incidents
            .into_iter()
            .map(|i| (i.incident_id.clone(), i))
            .collect();
        self.lanes.clear();
        for (inc, queue, seq) in snapshot.lane_seqs {
            self.lanes.entry((inc, queue)).or_default().next_seq = seq;
        }
        self.queued = 0;
        self.in_flight = 0;
        self.messages.clear();
        for rec in snapshot.messages {
            let key = (rec.message.incident_id.clone(), rec.message.queue_name.clone());
            let lane = self.lanes.entry(key).or_default();
            match rec.status {
                MessageStatus::Queued => {
                    lane.queue.push_back(rec.message.message_id);
                    self.queued += 1;
                }
                MessageStatus::Running => {
                    lane.busy = true;
                    self.in_flight += 1;
                }
                _ => {}
            }
            self.messages.insert(rec.message.message_id, rec);
        }
        self.next_incident = snapshot.next_incident;
        self.next_message = snapshot.next_message;
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            incidents: self.incidents.values().cloned().collect(),
            messages: self.messages.values().cloned().collect(),
            lane_seqs: self
                .lanes
                .iter()
                .map(|((inc, q), lane)| (inc.clone(), q.clone(), lane.next_seq))
                .collect(),
            next_incident: self.next_incident,
            next_message: self.next_message,
        }
    }

    /// Oldest queued message whose lane is idle.
    fn next_ready(&self) -> Option<MessageId> {
        self.lanes
            .values()
            .filter(|l| !l.busy)
            .filter_map(|l| l.queue.front().copied())
            .min()
    }

    fn incident(&self, id: &IncidentId) -> Result<&Incident, EngineError> {
        self.incidents
            .get(id)
            .ok_or_else(|| EngineError::UnknownIncident(id.clone()))
    }
}

pub struct Engine {
    kinds: RwLock<BTreeMap<String, Arc<WorkflowKind>>>,
    state: Mutex<EngineState>,
    work_cv: Condvar,
    idle_cv: Condvar,
    observer: RwLock<Option<Weak<dyn IncidentObserver>>>,
    services: RwLock<Option<Weak<dyn Any + Send + Sync>>>,
}

/// Builds an engine, optionally recovering it from a store file. Workflow
/// kinds referenced by persisted incidents must be registered here so that
/// recovered messages can find their handlers.
#[derive(Default)]
pub struct EngineBuilder {
    kinds: Vec<WorkflowKind>,
    store: Option<PathBuf>,
}

impl EngineBuilder {
    pub fn kind(mut self, kind: WorkflowKind) -> Self {
        self.kinds.push(kind);
        self
    }

    pub fn store(mut self, path: impl Into<PathBuf>) -> Self {
        self.store = Some(path.into());
        self
    }

    pub fn build(self) -> Result<Arc<Engine>, EngineError> {
        let engine = Engine::new();
        for kind in self.kinds {
            engine.register_kind(kind)?;
        }
        if let Some(path) = self.store {
            let (store, records) = Store::open(&path)?;
            let mut st = engine.lock();
            for record in records {
                match record {
                    Record::Snapshot(s) => st.restore(s),
                    Record::Event(e) => st.apply(e),
                }
            }
            st.store = Some(store);
            // a message that started before the restart must not run twice
            let interrupted: Vec<MessageId> = st
                .messages
                .values()
                .filter(|r| r.status == MessageStatus::Running)
                .map(|r| r.message.message_id)
                .collect();
            for message_id in interrupted {
                warn!(%message_id, "message interrupted by engine restart");
                st.commit(EngineEvent::MessageFinished {
                    message_id,
                    error: Some("interrupted by engine restart".into()),
                })?;
            }
            info!(
                incidents = st.incidents.len(),
                queued = st.queued,
                "engine state recovered from {}",
                path.display()
            );
        }
        Ok(engine)
    }
}

impl Engine {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            kinds: RwLock::new(BTreeMap::new()),
            state: Mutex::new(EngineState::default()),
            work_cv: Condvar::new(),
            idle_cv: Condvar::new(),
            observer: RwLock::new(None),
            services: RwLock::new(None),
        })
    }

    pub fn builder() -> EngineBuilder {
        EngineBuilder::default()
    }

    fn lock(&self) -> MutexGuard<'_, EngineState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_observer(&self, observer: Weak<dyn IncidentObserver>) {
        *self.observer.write().unwrap_or_else(|e| e.into_inner()) = Some(observer);
    }

    /// Make `services` reachable from stage handlers via [`StageContext::service`].
    pub fn set_services(&self, services: Weak<dyn Any + Send + Sync>) {
        *self.services.write().unwrap_or_else(|e| e.into_inner()) = Some(services);
    }

    pub fn service<T: Any + Send + Sync>(&self) -> Option<Arc<T>> {
        let any = self
            .services
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .and_then(Weak::upgrade)?;
        any.downcast::<T>().ok()
    }

    pub fn register_workflow_kind(
        &self,
        kind: &str,
        stages: Vec<WorkflowStage>,
        entry_queue: &str,
    ) -> Result<(), EngineError> {
        self.register_kind(WorkflowKind::new(kind, stages, entry_queue))
    }

    pub fn register_kind(&self, kind: WorkflowKind) -> Result<(), EngineError> {
        kind.validate()?;
        let mut kinds = self.kinds.write().unwrap_or_else(|e| e.into_inner());
        if kinds.contains_key(&kind.name) {
            return Err(EngineError::DuplicateKind(kind.name));
        }
        kinds.insert(kind.name.clone(), Arc::new(kind));
        Ok(())
    }

    /// Register every kind described in a manifest, resolving handler
    /// symbols through `handlers`. Returns the registered kind names.
    pub fn register_manifest(&self, text: &str, handlers: &HandlerRegistry) -> Result<Vec<String>, ManifestError> {
        let manifests = parse_manifest(text)?;
        let kinds = manifests
            .iter()
            .map(|m| m.instantiate(handlers))
            .collect::<Result<Vec<_>, _>>()?;
        let mut names = Vec::new();
        for kind in kinds {
            names.push(kind.name.clone());
            self.register_kind(kind).map_err(ManifestError::Engine)?;
        }
        Ok(names)
    }

    pub fn kinds(&self) -> Vec<String> {
        self.kinds
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    /// Whether any registered kind binds `queue`.
    pub fn queue_registered(&self, queue: &str) -> bool {
        self.kinds
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .any(|k| k.stages.iter().any(|s| s.queue_name == queue))
    }

    fn kind(&self, name: &str) -> Option<Arc<WorkflowKind>> {
        self.kinds
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(name)
            .cloned()
    }

    pub fn create_incident(&self, name: &str, kind: &str) -> Result<IncidentId, EngineError> {
        let def = self
            .kind(kind)
            .ok_or_else(|| EngineError::UnknownKind(kind.to_string()))?;
        let stage_bindings = def
            .stages
            .iter()
            .map(|s| (s.queue_name.clone(), s.stage_name.clone()))
            .collect();
        let mut st = self.lock();
        let incident_id = IncidentId::from_counter(st.next_incident + 1);
        st.commit(EngineEvent::IncidentCreated {
            incident_id: incident_id.clone(),
            name: name.to_string(),
            kind: kind.to_string(),
            created_at: Utc::now(),
            stage_bindings,
        })?;
        Ok(incident_id)
    }

    pub fn activate_incident(&self, id: &IncidentId) -> Result<MessageId, EngineError> {
        let mut st = self.lock();
        let inc = st.incident(id)?;
        if inc.state != IncidentState::Pending {
            return Err(EngineError::InvalidStateTransition {
                incident: id.clone(),
                from: inc.state,
                to: IncidentState::Active,
            });
        }
        let kind = self
            .kind(&inc.kind)
            .ok_or_else(|| EngineError::UnknownKind(inc.kind.clone()))?;
        st.commit(EngineEvent::IncidentState {
            incident_id: id.clone(),
            state: IncidentState::Active,
        })?;
        let msg = self.enqueue(&mut st, id, &kind.entry_queue, Vec::new(), ORIGIN_SYSTEM)?;
        Ok(msg)
    }

    pub fn send_message(
        &self,
        queue_name: &str,
        incident_id: &IncidentId,
        payload: Vec<u8>,
        originator: &str,
    ) -> Result<MessageId, EngineError> {
        let mut st = self.lock();
        let inc = st.incident(incident_id)?;
        if !inc.stage_bindings.contains_key(queue_name) {
            return Err(EngineError::UnknownQueue {
                incident: incident_id.clone(),
                queue: queue_name.to_string(),
            });
        }
        if inc.state != IncidentState::Active {
            return Err(EngineError::IncidentNotActive(incident_id.clone()));
        }
        self.enqueue(&mut st, incident_id, queue_name, payload, originator)
    }

    fn enqueue(
        &self,
        st: &mut EngineState,
        incident_id: &IncidentId,
        queue_name: &str,
        payload: Vec<u8>,
        originator: &str,
    ) -> Result<MessageId, EngineError> {
        let message_id = MessageId(st.next_message.max(1));
        let enqueue_seq = st
            .lanes
            .get(&(incident_id.clone(), queue_name.to_string()))
            .map_or(0, |l| l.next_seq);
        st.commit(EngineEvent::MessageEnqueued {
            message: Message {
                message_id,
                queue_name: queue_name.to_string(),
                incident_id: incident_id.clone(),
                payload,
                originator: originator.to_string(),
                enqueue_seq,
            },
        })?;
        self.work_cv.notify_all();
        Ok(message_id)
    }

    pub fn complete_incident(&self, id: &IncidentId) -> Result<(), EngineError> {
        self.close_incident(id, IncidentState::Complete)
    }

    /// Cancel an incident (from PENDING or ACTIVE). Queued messages are
    /// discarded and the observer is asked to cancel its simulations.
    pub fn cancel_incident(&self, id: &IncidentId) -> Result<(), EngineError> {
        self.close_incident(id, IncidentState::Cancelled)?;
        let observer = self
            .observer
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .and_then(Weak::upgrade);
        if let Some(observer) = observer {
            observer.incident_cancelled(id);
        }
        Ok(())
    }

    fn close_incident(&self, id: &IncidentId, to: IncidentState) -> Result<(), EngineError> {
        let mut st = self.lock();
        let from = st.incident(id)?.state;
        let allowed = match to {
            IncidentState::Complete => from == IncidentState::Active,
            IncidentState::Cancelled => matches!(from, IncidentState::Pending | IncidentState::Active),
            _ => false,
        };
        if !allowed {
            return Err(EngineError::InvalidStateTransition {
                incident: id.clone(),
                from,
                to,
            });
        }
        st.commit(EngineEvent::IncidentState {
            incident_id: id.clone(),
            state: to,
        })?;
        if st.queued == 0 && st.in_flight == 0 {
            self.idle_cv.notify_all();
        }
        Ok(())
    }

    pub fn incident(&self, id: &IncidentId) -> Option<Incident> {
        self.lock().incidents.get(id).cloned()
    }

    pub fn incidents(&self) -> Vec<Incident> {
        self.lock().incidents.values().cloned().collect()
    }

    /// Whether `queue` is bound for the incident's workflow kind.
    pub fn queue_bound(&self, id: &IncidentId, queue: &str) -> Result<bool, EngineError> {
        Ok(self.lock().incident(id)?.stage_bindings.contains_key(queue))
    }

    pub fn message(&self, id: MessageId) -> Option<MessageRecord> {
        self.lock().messages.get(&id).cloned()
    }

    pub fn messages_for(&self, incident: &IncidentId) -> Vec<MessageRecord> {
        self.lock()
            .messages
            .values()
            .filter(|r| r.message.incident_id == *incident)
            .cloned()
            .collect()
    }

    /// Queued plus running messages.
    pub fn pending_count(&self) -> usize {
        let st = self.lock();
        st.queued + st.in_flight
    }

    pub fn kv_get(&self, id: &IncidentId, key: &str) -> Option<Vec<u8>> {
        self.lock().incidents.get(id)?.kv_store.get(key).cloned()
    }

    pub fn kv_put(&self, id: &IncidentId, key: &str, value: Vec<u8>) -> Result<(), EngineError> {
        let mut st = self.lock();
        st.incident(id)?;
        st.commit(EngineEvent::KvPut {
            incident_id: id.clone(),
            key: key.to_string(),
            value,
        })
    }

    pub fn link_simulation(&self, id: &IncidentId, sim: &SimId) -> Result<(), EngineError> {
        let mut st = self.lock();
        st.incident(id)?;
        st.commit(EngineEvent::SimulationLinked {
            incident_id: id.clone(),
            sim_id: sim.clone(),
        })
    }

    pub fn link_data(&self, id: &IncidentId, data: &DataId) -> Result<(), EngineError> {
        let mut st = self.lock();
        st.incident(id)?;
        st.commit(EngineEvent::DataLinked {
            incident_id: id.clone(),
            data_id: data.clone(),
        })
    }

    pub fn unlink_data(&self, id: &IncidentId, data: &DataId) -> Result<(), EngineError> {
        let mut st = self.lock();
        st.incident(id)?;
        st.commit(EngineEvent::DataUnlinked {
            incident_id: id.clone(),
            data_id: data.clone(),
        })
    }

    /// SHA-256 over the canonical serialization of incidents and message
    /// records. Equal digests mean equal persisted state.
    pub fn state_digest(&self) -> String {
        let st = self.lock();
        let bytes = serde_json::to_vec(&(&st.incidents, st.messages.values().collect::<Vec<_>>()))
            .expect("state serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rewrite the store as a single snapshot record.
    pub fn compact(&self) -> Result<(), EngineError> {
        let mut st = self.lock();
        let snapshot = st.snapshot();
        if let Some(store) = st.store.as_mut() {
            store.compact(snapshot)?;
        }
        Ok(())
    }

    /// Claim the next eligible message, marking it started.
    fn claim(&self, st: &mut EngineState) -> Option<(Message, String, Option<StageHandler>)> {
        let id = st.next_ready()?;
        st.commit_or_log(EngineEvent::MessageStarted { message_id: id });
        let message = st.messages[&id].message.clone();
        let kind = st.incidents.get(&message.incident_id).map(|i| i.kind.clone());
        let stage = kind
            .and_then(|k| self.kind(&k))
            .and_then(|k| k.stage_for_queue(&message.queue_name).cloned());
        let stage_name = stage.as_ref().map_or_else(String::new, |s| s.stage_name.clone());
        Some((message, stage_name, stage.map(|s| s.handler)))
    }

    fn execute(&self, message: Message, stage_name: String, handler: Option<StageHandler>) {
        let outcome = match handler {
            None => Err("no handler registered for this queue".to_string()),
            Some(handler) => {
                let ctx = StageContext {
                    engine: self,
                    stage_name: &stage_name,
                    message: &message,
                };
                match panic::catch_unwind(AssertUnwindSafe(|| handler(&ctx))) {
                    Ok(Ok(())) => Ok(()),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(panic) => Err(panic_text(&panic)),
                }
            }
        };
        if let Err(e) = &outcome {
            error!(
                message = %message.message_id,
                incident = %message.incident_id,
                queue = %message.queue_name,
                error = %e,
                "stage handler failed"
            );
        }
        let mut st = self.lock();
        st.commit_or_log(EngineEvent::MessageFinished {
            message_id: message.message_id,
            error: outcome.err(),
        });
        self.work_cv.notify_all();
        if st.queued == 0 && st.in_flight == 0 {
            self.idle_cv.notify_all();
        }
    }

    /// Dispatch on the calling thread until no message is eligible. Returns
    /// the number of handlers run.
    pub fn run_pending(&self) -> usize {
        let mut count = 0;
        loop {
            let claimed = {
                let mut st = self.lock();
                self.claim(&mut st)
            };
            let Some((message, stage, handler)) = claimed else {
                return count;
            };
            self.execute(message, stage, handler);
            count += 1;
        }
    }

    pub fn start_workers(self: &Arc<Self>, n: usize) -> WorkerPool {
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..n.max(1))
            .map(|i| {
                let engine = Arc::clone(self);
                let stop = Arc::clone(&stop);
                thread::Builder::new()
                    .name(format!("engine-worker-{i}"))
                    .spawn(move || engine.worker_loop(&stop))
                    .expect("spawn engine worker")
            })
            .collect();
        WorkerPool {
            engine: Arc::clone(self),
            stop,
            handles,
        }
    }

    fn worker_loop(&self, stop: &AtomicBool) {
        loop {
            let claimed = {
                let mut st = self.lock();
                loop {
                    if stop.load(Ordering::Acquire) {
                        return;
                    }
                    if let Some(c) = self.claim(&mut st) {
                        break c;
                    }
                    st = self.work_cv.wait(st).unwrap_or_else(|e| e.into_inner());
                }
            };
            let (message, stage, handler) = claimed;
            self.execute(message, stage, handler);
        }
    }

    /// Block until nothing is queued or running, or `timeout` passes.
    /// Returns whether the engine went idle.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let st = self.lock();
        let (st, _) = self
            .idle_cv
            .wait_timeout_while(st, timeout, |st| st.queued > 0 || st.in_flight > 0)
            .unwrap_or_else(|e| e.into_inner());
        st.queued == 0 && st.in_flight == 0
    }
}

fn panic_text(panic: &Box<dyn Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("handler panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("handler panicked: {s}")
    } else {
        "handler panicked".to_string()
    }
}

/// Worker threads dispatching messages; stopped and joined on drop.
pub struct WorkerPool {
    engine: Arc<Engine>,
    stop: Arc<AtomicBool>,
    handles: Vec<thread::JoinHandle<()>>,
}

impl WorkerPool {
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::Release);
        {
            let _guard = self.engine.lock();
            self.engine.work_cv.notify_all();
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// What a stage handler sees: the triggering message and a handle back to
/// the engine (and, through [`StageContext::service`], to the managers).
pub struct StageContext<'a> {
    engine: &'a Engine,
    stage_name: &'a str,
    message: &'a Message,
}

impl<'a> StageContext<'a> {
    pub fn engine(&self) -> &'a Engine {
        self.engine
    }

    pub fn message(&self) -> &'a Message {
        self.message
    }

    pub fn stage_name(&self) -> &'a str {
        self.stage_name
    }

    pub fn incident_id(&self) -> &'a IncidentId {
        &self.message.incident_id
    }

    pub fn payload(&self) -> &'a [u8] {
        &self.message.payload
    }

    /// Send a message on behalf of this stage.
    pub fn send(&self, queue: &str, payload: Vec<u8>) -> Result<MessageId, EngineError> {
        self.engine
            .send_message(queue, &self.message.incident_id, payload, self.stage_name)
    }

    pub fn kv_get(&self, key: &str) -> Option<Vec<u8>> {
        self.engine.kv_get(&self.message.incident_id, key)
    }

    pub fn kv_put(&self, key: &str, value: Vec<u8>) -> Result<(), EngineError> {
        self.engine.kv_put(&self.message.incident_id, key, value)
    }

    pub fn service<T: Any + Send + Sync>(&self) -> Option<Arc<T>> {
        self.engine.service::<T>()
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

mod b64_map {
    use std::collections::BTreeMap;

    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k, STANDARD.encode(v)))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Vec<u8>>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| STANDARD.decode(v).map(|v| (k, v)).map_err(serde::de::Error::custom))
            .collect()
    }
}

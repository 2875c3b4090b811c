//! One operator session: plugin runs over frame streams, with every step
//! committed to the audit trail.
//!
//! Lifecycle of a run, as recorded in the audit log:
//!
//! ```text
//! [Rerun] PluginSelected ParameterEntered* RunStarted ... RunStopped
//!     then either  ResultRecorded RelevanceMarked(relevant)
//!     or           RelevanceMarked(irrelevant) DestructionRecorded
//! ```
//!
//! Results stay in memory between stop and the relevance decision, so an
//! irrelevant run never has its addresses written anywhere.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{
    AuditConfig, AuditError, AuditEvent, AuditLog, DestructionRecord, EventKind, Payload,
};
use crate::capture::{FrameStream, StopSignal, StreamEvent, Terminal};
use crate::plugin::{
    validate_params, ParamMap, Plugin, PluginDescriptor, PluginError, PluginResult, Registry,
};

/// Live counters are republished at least this often while frames arrive.
const PUBLISH_INTERVAL: Duration = Duration::from_millis(20);
const PUBLISH_EVERY_FRAMES: u64 = 1024;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("unknown run {0}")]
    UnknownRun(u64),
    #[error("run {0} is still active")]
    RunStillActive(u64),
    #[error("relevance of run {0} has already been decided")]
    RelevanceAlreadyMarked(u64),
}

impl SessionError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Plugin(e) => match e {
                PluginError::UnknownPlugin(_) => "UnknownPlugin",
                PluginError::DuplicatePluginId(_) => "DuplicatePluginId",
                PluginError::MissingParameter(_) => "MissingParameter",
                PluginError::InvalidParameterValue(_) => "InvalidParameterValue",
                PluginError::UnknownParameter(_) => "UnknownParameter",
            },
            SessionError::Audit(e) => match e {
                AuditError::MissingTimeAnchor => "MissingTimeAnchor",
                AuditError::StorageFailure(_) => "StorageFailure",
                AuditError::UnreadableLog(_) => "UnreadableLog",
            },
            SessionError::UnknownRun(_) => "UnknownRun",
            SessionError::RunStillActive(_) => "RunStillActive",
            SessionError::RelevanceAlreadyMarked(_) => "RelevanceAlreadyMarked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Running,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Relevant,
    Irrelevant,
}

/// Why a run was started.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOrigin {
    Operator,
    /// Operator escalated from a previous run (e.g. KnownIP to SourceAddr).
    Escalation(u64),
    Rerun(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: u64,
    pub plugin_id: String,
    pub parameters: BTreeMap<String, String>,
    pub status: RunStatus,
    pub live_counters: PluginResult,
    pub started_at_offset_ns: u64,
    pub stream_terminal: Option<Terminal>,
    pub rerun_of: Option<u64>,
    pub escalated_from: Option<u64>,
    pub relevance: Option<Verdict>,
}

/// Counters shared between a run's worker thread and readers.
struct RunShared {
    snapshot: Mutex<PluginResult>,
    terminal: Mutex<Option<Terminal>>,
    frames: AtomicU64,
}

impl RunShared {
    fn publish(&self, snapshot: PluginResult) {
        *self.snapshot.lock().unwrap_or_else(|e| e.into_inner()) = snapshot;
    }
}

/// Read handle on a run's live counters. Does not need the session.
#[derive(Clone)]
pub struct RunMonitor {
    run_id: u64,
    shared: Arc<RunShared>,
}

impl fmt::Debug for RunMonitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunMonitor")
            .field("run_id", &self.run_id)
            .finish()
    }
}

impl RunMonitor {
    pub fn run_id(&self) -> u64 {
        self.run_id
    }

    pub fn snapshot(&self) -> PluginResult {
        self.shared
            .snapshot
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn frames_observed(&self) -> u64 {
        self.shared.frames.load(Ordering::Acquire)
    }

    /// Set once the stream has ended, whether or not the run was stopped.
    pub fn stream_terminal(&self) -> Option<Terminal> {
        self.shared
            .terminal
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

struct Worker {
    stop: StopSignal,
    thread: JoinHandle<Box<dyn Plugin>>,
}

struct RunEntry {
    plugin_id: String,
    params: ParamMap,
    started_at_offset_ns: u64,
    stopped_at_offset_ns: Option<u64>,
    rerun_of: Option<u64>,
    escalated_from: Option<u64>,
    shared: Arc<RunShared>,
    worker: Option<Worker>,
    plugin: Option<Box<dyn Plugin>>,
    result: Option<PluginResult>,
    relevance: Option<Verdict>,
}

impl RunEntry {
    fn is_running(&self) -> bool {
        self.result.is_none()
    }

    /// Stops the stream, waits for the worker and finalizes. No-op once done.
    fn halt(&mut self) -> &PluginResult {
        if self.result.is_none() {
            let plugin = match self.worker.take() {
                Some(w) => {
                    w.stop.trigger();
                    w.thread
                        .join()
                        .unwrap_or_else(|p| std::panic::resume_unwind(p))
                }
                None => self.plugin.take().expect("run without worker or plugin"),
            };
            let result = plugin.finalize();
            self.shared.publish(result.clone());
            self.plugin = Some(plugin);
            self.result = Some(result);
        }
        self.result.as_ref().expect("set above")
    }

    fn params_text(&self) -> BTreeMap<String, String> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect()
    }
}

fn drive(
    mut stream: FrameStream,
    mut plugin: Box<dyn Plugin>,
    shared: Arc<RunShared>,
) -> Box<dyn Plugin> {
    let mut last_publish = Instant::now();
    let mut unpublished = 0u64;
    loop {
        match stream.next_event() {
            StreamEvent::Frame(frame) => {
                plugin.observe(&frame);
                shared.frames.fetch_add(1, Ordering::AcqRel);
                unpublished += 1;
                if unpublished >= PUBLISH_EVERY_FRAMES || last_publish.elapsed() >= PUBLISH_INTERVAL
                {
                    shared.publish(plugin.snapshot());
                    unpublished = 0;
                    last_publish = Instant::now();
                }
            }
            StreamEvent::End(terminal) => {
                shared.publish(plugin.snapshot());
                *shared.terminal.lock().unwrap_or_else(|e| e.into_inner()) = Some(terminal);
                return plugin;
            }
        }
    }
}

fn payload<const N: usize>(pairs: [(&str, serde_json::Value); N]) -> Payload {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub struct Session {
    registry: Arc<Registry>,
    audit: AuditLog,
    runs: BTreeMap<u64, RunEntry>,
    next_run_id: u64,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("audit", &self.audit)
            .field("runs", &self.runs.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Session {
    pub fn begin(registry: Arc<Registry>, audit: AuditConfig) -> Result<Self, SessionError> {
        Ok(Self {
            registry,
            audit: AuditLog::begin_session(audit)?,
            runs: BTreeMap::new(),
            next_run_id: 1,
        })
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn enumerate_plugins(&self) -> Vec<PluginDescriptor> {
        self.registry.enumerate()
    }

    pub fn active_run(&self) -> Option<u64> {
        self.runs
            .iter()
            .find(|(_, r)| r.is_running())
            .map(|(id, _)| *id)
    }

    pub fn run_ids(&self) -> Vec<u64> {
        self.runs.keys().copied().collect()
    }

    /// Commits an event. A storage failure halts any active run, since
    /// capture must not continue unlogged.
    fn log(&mut self, kind: EventKind, payload: Payload) -> Result<AuditEvent, SessionError> {
        match self.audit.append(kind, payload) {
            Ok(e) => Ok(e),
            Err(err) => {
                let offset = self.audit.clock().offset_ns();
                for run in self.runs.values_mut().filter(|r| r.is_running()) {
                    run.halt();
                    run.stopped_at_offset_ns = Some(offset);
                }
                Err(err.into())
            }
        }
    }

    /// Validates parameters, records them, then starts consuming `stream`.
    pub fn start_run(
        &mut self,
        plugin_id: &str,
        raw_params: &BTreeMap<String, String>,
        stream: FrameStream,
        origin: RunOrigin,
    ) -> Result<RunState, SessionError> {
        if let Some(active) = self.active_run() {
            return Err(SessionError::RunStillActive(active));
        }
        let registry = Arc::clone(&self.registry);
        let factory = registry.get(plugin_id)?;
        let params = validate_params(&factory.descriptor(), raw_params)?;
        if let RunOrigin::Escalation(prev) | RunOrigin::Rerun(prev) = origin {
            if !self.runs.contains_key(&prev) {
                return Err(SessionError::UnknownRun(prev));
            }
        }

        let run_id = self.next_run_id;
        self.next_run_id += 1;
        let (rerun_of, escalated_from) = match origin {
            RunOrigin::Operator => (None, None),
            RunOrigin::Escalation(prev) => (None, Some(prev)),
            RunOrigin::Rerun(prev) => (Some(prev), None),
        };

        if let Some(prev) = rerun_of {
            self.log(
                EventKind::Rerun,
                payload([("run_id", json!(run_id)), ("previous_run_id", json!(prev))]),
            )?;
        }
        let mut selected = payload([("run_id", json!(run_id)), ("plugin", json!(plugin_id))]);
        if let Some(prev) = escalated_from {
            selected.insert("escalated_from".into(), json!(prev));
        }
        self.log(EventKind::PluginSelected, selected)?;
        for (name, value) in &params {
            self.log(
                EventKind::ParameterEntered,
                payload([
                    ("run_id", json!(run_id)),
                    ("name", json!(name)),
                    ("value", json!(value.to_string())),
                ]),
            )?;
        }
        let started = self.log(EventKind::RunStarted, payload([("run_id", json!(run_id))]))?;

        let plugin = factory.instantiate(&params);
        let shared = Arc::new(RunShared {
            snapshot: Mutex::new(plugin.snapshot()),
            terminal: Mutex::new(None),
            frames: AtomicU64::new(0),
        });
        let stop = stream.stop_handle();
        let thread = {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name(format!("run-{run_id}"))
                .spawn(move || drive(stream, plugin, shared))
                .expect("spawn run thread")
        };
        self.runs.insert(
            run_id,
            RunEntry {
                plugin_id: plugin_id.to_string(),
                params,
                started_at_offset_ns: started.offset_ns,
                stopped_at_offset_ns: None,
                rerun_of,
                escalated_from,
                shared,
                worker: Some(Worker { stop, thread }),
                plugin: None,
                result: None,
                relevance: None,
            },
        );
        tracing::info!(run_id, plugin_id, "run started");
        self.run_state(run_id)
    }

    /// Stops the run and returns its final result. Repeated calls return
    /// the same result without logging again.
    pub fn stop_run(&mut self, run_id: u64) -> Result<PluginResult, SessionError> {
        let run = self
            .runs
            .get_mut(&run_id)
            .ok_or(SessionError::UnknownRun(run_id))?;
        if let Some(result) = &run.result {
            return Ok(result.clone());
        }
        let result = run.halt().clone();
        let terminal = run
            .shared
            .terminal
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone();
        let frames = run.shared.frames.load(Ordering::Acquire);
        let event = self.log(
            EventKind::RunStopped,
            payload([
                ("run_id", json!(run_id)),
                ("stream_terminal", json!(terminal.map(|t| t.to_string()))),
                ("frames_observed", json!(frames)),
            ]),
        )?;
        if let Some(run) = self.runs.get_mut(&run_id) {
            run.stopped_at_offset_ns = Some(event.offset_ns);
        }
        tracing::info!(run_id, frames, "run stopped");
        Ok(result)
    }

    /// Starts a new run of the same plugin with the same parameters.
    pub fn rerun(&mut self, previous: u64, stream: FrameStream) -> Result<RunState, SessionError> {
        let prev = self
            .runs
            .get(&previous)
            .ok_or(SessionError::UnknownRun(previous))?;
        if prev.is_running() {
            return Err(SessionError::RunStillActive(previous));
        }
        let plugin_id = prev.plugin_id.clone();
        let params = prev.params_text();
        self.start_run(&plugin_id, &params, stream, RunOrigin::Rerun(previous))
    }

    /// Relevant: the result is written to the audit trail. Irrelevant: the
    /// held result is overwritten and only a destruction record is written.
    pub fn mark_relevance(
        &mut self,
        run_id: u64,
        verdict: Verdict,
    ) -> Result<Option<DestructionRecord>, SessionError> {
        let run = self
            .runs
            .get_mut(&run_id)
            .ok_or(SessionError::UnknownRun(run_id))?;
        if run.is_running() {
            return Err(SessionError::RunStillActive(run_id));
        }
        if run.relevance.is_some() {
            return Err(SessionError::RelevanceAlreadyMarked(run_id));
        }
        match verdict {
            Verdict::Relevant => {
                let result = run.result.clone().expect("stopped run has a result");
                let text = result.to_text();
                self.log(
                    EventKind::ResultRecorded,
                    payload([
                        ("run_id", json!(run_id)),
                        ("result", json!(result)),
                        ("text", json!(text)),
                    ]),
                )?;
                self.log(
                    EventKind::RelevanceMarked,
                    payload([("run_id", json!(run_id)), ("verdict", json!(verdict))]),
                )?;
                self.runs.get_mut(&run_id).expect("present").relevance = Some(verdict);
                Ok(None)
            }
            Verdict::Irrelevant => {
                let destroyed = run.result.as_ref().map_or(0, PluginResult::record_count);
                if let Some(result) = run.result.as_mut() {
                    result.scrub();
                }
                if let Some(plugin) = run.plugin.as_mut() {
                    plugin.scrub();
                    run.shared.publish(plugin.snapshot());
                }
                run.relevance = Some(verdict);
                let record = DestructionRecord {
                    run_id,
                    destroyed_record_count: destroyed,
                    covered_offset_range: (
                        run.started_at_offset_ns,
                        run.stopped_at_offset_ns.unwrap_or(run.started_at_offset_ns),
                    ),
                    reason: "marked irrelevant by operator".into(),
                };
                self.log(
                    EventKind::RelevanceMarked,
                    payload([("run_id", json!(run_id)), ("verdict", json!(verdict))]),
                )?;
                self.log(EventKind::DestructionRecorded, record.to_payload())?;
                Ok(Some(record))
            }
        }
    }

    pub fn monitor(&self, run_id: u64) -> Result<RunMonitor, SessionError> {
        let run = self
            .runs
            .get(&run_id)
            .ok_or(SessionError::UnknownRun(run_id))?;
        Ok(RunMonitor {
            run_id,
            shared: Arc::clone(&run.shared),
        })
    }

    pub fn run_state(&self, run_id: u64) -> Result<RunState, SessionError> {
        let run = self
            .runs
            .get(&run_id)
            .ok_or(SessionError::UnknownRun(run_id))?;
        let live_counters = match &run.result {
            Some(r) => r.clone(),
            None => run
                .shared
                .snapshot
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .clone(),
        };
        Ok(RunState {
            run_id,
            plugin_id: run.plugin_id.clone(),
            parameters: run.params_text(),
            status: if run.is_running() {
                RunStatus::Running
            } else {
                RunStatus::Stopped
            },
            live_counters,
            started_at_offset_ns: run.started_at_offset_ns,
            stream_terminal: run
                .shared
                .terminal
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .clone(),
            rerun_of: run.rerun_of,
            escalated_from: run.escalated_from,
            relevance: run.relevance,
        })
    }

    /// Blocks until the run's stream has ended on its own (end of file or
    /// source error). Returns false on timeout.
    pub fn wait_for_stream_end(
        &self,
        run_id: u64,
        timeout: Duration,
    ) -> Result<bool, SessionError> {
        let monitor = self.monitor(run_id)?;
        let deadline = Instant::now() + timeout;
        while monitor.stream_terminal().is_none() {
            if Instant::now() >= deadline {
                return Ok(false);
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        Ok(true)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        for run in self.runs.values_mut() {
            if let Some(w) = run.worker.take() {
                w.stop.trigger();
                let _ = w.thread.join();
            }
        }
    }
}

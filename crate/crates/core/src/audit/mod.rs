//! Append-only, hash-chained audit trail of investigator actions.
//!
//! ## File format
//!
//! Line-delimited JSON. The first line is a header naming the format
//! version and digest algorithm. Every following line is one event:
//!
//! ```text
//! {"digest":"sha256","format":"tapid-audit","version":1}
//! {"chain_digest":"…","kind":"SessionStart","offset_ns":0,"payload":{…},"seq":1,"wall_time":"2015-06-01 12:00:00.000"}
//! ```
//!
//! Lines are canonical JSON: object keys sorted, no insignificant
//! whitespace. `chain_digest` is SHA-256 over the previous event's digest
//! (the header line's digest for event 1) followed by the canonical
//! serialization of this event without its `chain_digest` field.

mod clock;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use clock::{
    parse_entered_time, ManualClock, MonotonicClock, SessionClock, SystemClock, TimeParseError,
    WALL_TIME_FORMAT,
};

pub const FORMAT_NAME: &str = "tapid-audit";
pub const FORMAT_VERSION: u64 = 1;
pub const DIGEST_ALGORITHM: &str = "sha256";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("logging is enabled but no date and time was entered")]
    MissingTimeAnchor,
    #[error("audit storage failure: {0}")]
    StorageFailure(String),
    #[error("audit log unreadable: {0}")]
    UnreadableLog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    SessionStart,
    LoggingBypassed,
    PluginSelected,
    ParameterEntered,
    RunStarted,
    RunStopped,
    ResultRecorded,
    RelevanceMarked,
    DestructionRecorded,
    Rerun,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub type Payload = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub offset_ns: u64,
    pub wall_time: Option<String>,
    pub kind: EventKind,
    pub payload: Payload,
    pub chain_digest: String,
}

impl AuditEvent {
    fn body(&self) -> Value {
        json!({
            "seq": self.seq,
            "offset_ns": self.offset_ns,
            "wall_time": self.wall_time,
            "kind": self.kind,
            "payload": self.payload,
        })
    }

    fn canonical_body(&self) -> String {
        canonical_json(&self.body())
    }

    pub fn to_line(&self) -> String {
        line_with_digest(&self.canonical_body(), &self.chain_digest)
    }

    pub fn run_id(&self) -> Option<u64> {
        self.payload.get("run_id").and_then(Value::as_u64)
    }
}

/// Proof that an irrelevant run's identifying data was destroyed. Carries
/// counts and a time range, never addresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestructionRecord {
    pub run_id: u64,
    pub destroyed_record_count: u64,
    pub covered_offset_range: (u64, u64),
    pub reason: String,
}

impl DestructionRecord {
    pub fn to_payload(&self) -> Payload {
        let mut p = Payload::new();
        p.insert("run_id".into(), json!(self.run_id));
        p.insert(
            "destroyed_record_count".into(),
            json!(self.destroyed_record_count),
        );
        p.insert(
            "covered_start_ns".into(),
            json!(self.covered_offset_range.0),
        );
        p.insert("covered_end_ns".into(), json!(self.covered_offset_range.1));
        p.insert("reason".into(), json!(self.reason));
        p
    }
}

/// Serializes with object keys sorted at every level and no whitespace.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(k).expect("string key"));
                    out.push(':');
                    write(&map[*k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Inserts `chain_digest` into a canonical body. The key sorts before every
/// body key, so it goes first.
fn line_with_digest(body: &str, digest: &str) -> String {
    format!(
        "{{\"chain_digest\":{},{}",
        Value::String(digest.to_string()),
        &body[1..]
    )
}

fn header_line() -> String {
    canonical_json(&json!({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "digest": DIGEST_ALGORITHM,
    }))
}

fn chain(prev: &[u8; 32], body: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(body.as_bytes());
    h.finalize().into()
}

fn genesis(header: &str) -> [u8; 32] {
    Sha256::digest(header.as_bytes()).into()
}

/// Durable destination for audit lines.
pub trait AuditStore: Send {
    /// Appends one line. Must not return until the line is persisted.
    fn append_line(&mut self, line: &str) -> io::Result<()>;
    /// True if the store survives the process.
    fn is_persistent(&self) -> bool;
}

/// File-backed store. Each line is flushed and synced before returning.
pub struct FileStore {
    file: File,
}

impl FileStore {
    /// Creates a new log file; refuses to reuse an existing one.
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Ok(Self { file })
    }
}

impl AuditStore for FileStore {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        self.file.flush()?;
        self.file.sync_data()
    }

    fn is_persistent(&self) -> bool {
        true
    }
}

/// Volatile store, used when logging is bypassed. Discarded with the process.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore(Arc<Mutex<Vec<u8>>>);

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl AuditStore for MemoryStore {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        let mut buf = self.0.lock().unwrap_or_else(|e| e.into_inner());
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        Ok(())
    }

    fn is_persistent(&self) -> bool {
        false
    }
}

/// Wraps a store and fails every append after the first `healthy` ones.
pub struct FaultyStore<S> {
    inner: S,
    remaining: usize,
}

impl<S: AuditStore> FaultyStore<S> {
    pub fn new(inner: S, healthy: usize) -> Self {
        Self {
            inner,
            remaining: healthy,
        }
    }
}

impl<S: AuditStore> AuditStore for FaultyStore<S> {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        if self.remaining == 0 {
            return Err(io::Error::other("simulated storage failure"));
        }
        self.remaining -= 1;
        self.inner.append_line(line)
    }

    fn is_persistent(&self) -> bool {
        self.inner.is_persistent()
    }
}

/// How a session's audit trail is set up.
pub struct AuditConfig {
    pub logging_enabled: bool,
    pub entered_now: Option<NaiveDateTime>,
    /// Where lines go when logging is enabled. Ignored in bypass mode, which
    /// always keeps a volatile in-memory trail.
    pub store: Option<Box<dyn AuditStore>>,
    pub clock: Arc<dyn MonotonicClock>,
}

impl AuditConfig {
    pub fn enabled(entered_now: NaiveDateTime, store: Box<dyn AuditStore>) -> Self {
        Self {
            logging_enabled: true,
            entered_now: Some(entered_now),
            store: Some(store),
            clock: Arc::new(SystemClock::new()),
        }
    }

    pub fn bypassed() -> Self {
        Self {
            logging_enabled: false,
            entered_now: None,
            store: None,
            clock: Arc::new(SystemClock::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn MonotonicClock>) -> Self {
        self.clock = clock;
        self
    }
}

/// The session's audit trail. Single writer; committed events are readable.
pub struct AuditLog {
    store: Box<dyn AuditStore>,
    clock: SessionClock,
    logging_enabled: bool,
    header: String,
    last_digest: [u8; 32],
    events: Vec<AuditEvent>,
    failed: Option<String>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog")
            .field("logging_enabled", &self.logging_enabled)
            .field("events", &self.events.len())
            .field("failed", &self.failed)
            .finish()
    }
}

impl AuditLog {
    /// Starts the trail and records `SessionStart`, or `LoggingBypassed`
    /// when logging is disabled.
    pub fn begin_session(config: AuditConfig) -> Result<Self, AuditError> {
        if config.logging_enabled && config.entered_now.is_none() {
            return Err(AuditError::MissingTimeAnchor);
        }
        let (store, anchor): (Box<dyn AuditStore>, _) = if config.logging_enabled {
            let store = config.store.unwrap_or_else(|| Box::new(MemoryStore::new()));
            (store, config.entered_now)
        } else {
            (Box::new(MemoryStore::new()), None)
        };
        let header = header_line();
        let mut log = Self {
            store,
            clock: SessionClock::anchored(anchor, config.clock),
            logging_enabled: config.logging_enabled,
            last_digest: genesis(&header),
            header,
            events: Vec::new(),
            failed: None,
        };
        log.store
            .append_line(&log.header)
            .map_err(|e| AuditError::StorageFailure(e.to_string()))?;
        let mut payload = Payload::new();
        payload.insert("digest".into(), json!(DIGEST_ALGORITHM));
        payload.insert("persistent".into(), json!(log.store.is_persistent()));
        if let Some(anchor) = anchor {
            payload.insert(
                "entered_time".into(),
                json!(anchor.format("%Y-%m-%d %H:%M").to_string()),
            );
        }
        let kind = if config.logging_enabled {
            EventKind::SessionStart
        } else {
            EventKind::LoggingBypassed
        };
        log.append(kind, payload)?;
        Ok(log)
    }

    pub fn logging_enabled(&self) -> bool {
        self.logging_enabled
    }

    pub fn clock(&self) -> &SessionClock {
        &self.clock
    }

    pub fn is_failed(&self) -> bool {
        self.failed.is_some()
    }

    /// Commits one event. Once a write fails, every later append fails too,
    /// so nothing is ever recorded after a gap.
    pub fn append(&mut self, kind: EventKind, payload: Payload) -> Result<AuditEvent, AuditError> {
        if let Some(reason) = &self.failed {
            return Err(AuditError::StorageFailure(reason.clone()));
        }
        let offset_ns = self.clock.offset_ns();
        // Offsets come from a monotonic clock, but keep them ordered even if
        // a caller-supplied clock misbehaves.
        let offset_ns = self
            .events
            .last()
            .map_or(offset_ns, |e| e.offset_ns.max(offset_ns));
        let mut event = AuditEvent {
            seq: self.events.len() as u64 + 1,
            offset_ns,
            wall_time: self
                .clock
                .wall_time_at(offset_ns)
                .map(|t| t.format(WALL_TIME_FORMAT).to_string()),
            kind,
            payload,
            chain_digest: String::new(),
        };
        let body = event.canonical_body();
        let digest = chain(&self.last_digest, &body);
        event.chain_digest = hex::encode(digest);
        if let Err(e) = self
            .store
            .append_line(&line_with_digest(&body, &event.chain_digest))
        {
            let reason = e.to_string();
            tracing::error!(%reason, seq = event.seq, "audit append failed");
            self.failed = Some(reason.clone());
            return Err(AuditError::StorageFailure(reason));
        }
        self.last_digest = digest;
        self.events.push(event.clone());
        Ok(event)
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    /// The committed log, byte-for-byte as written.
    pub fn export(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.header.as_bytes());
        out.push(b'\n');
        for e in &self.events {
            out.extend_from_slice(e.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "seq")]
pub enum ChainStatus {
    Intact,
    /// First event whose line or digest does not verify. `0` means the
    /// header line itself is damaged.
    BrokenAt(u64),
}

impl fmt::Display for ChainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainStatus::Intact => f.write_str("Intact"),
            ChainStatus::BrokenAt(seq) => write!(f, "BrokenAt({seq})"),
        }
    }
}

/// Re-derives every digest from the header onwards.
///
/// A line must parse, be in canonical form, carry the next sequence number
/// and reproduce its digest; the first line failing any of these is
/// reported. Requiring canonical form means any altered octet is caught,
/// even one that would leave the parsed values unchanged.
pub fn verify_chain_bytes(bytes: &[u8]) -> ChainStatus {
    if bytes.is_empty() {
        return ChainStatus::Intact;
    }
    let mut lines = bytes.split(|&b| b == b'\n').collect::<Vec<_>>();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    } else {
        // Missing final newline: the last line was not completely written.
        let seq = lines.len().saturating_sub(1) as u64;
        if let Some(status) = verify_lines(&lines[..lines.len() - 1]) {
            return status;
        }
        return ChainStatus::BrokenAt(seq);
    }
    verify_lines(&lines).unwrap_or(ChainStatus::Intact)
}

fn verify_lines(lines: &[&[u8]]) -> Option<ChainStatus> {
    let (header, events) = lines.split_first()?;
    let header_ok = std::str::from_utf8(header)
        .ok()
        .and_then(|h| serde_json::from_str::<Value>(h).ok().map(|v| (h, v)))
        .filter(|(h, v)| {
            *h == canonical_json(v)
                && v["format"] == FORMAT_NAME
                && v["version"] == FORMAT_VERSION
                && v["digest"] == DIGEST_ALGORITHM
        });
    let Some((header, _)) = header_ok else {
        return Some(ChainStatus::BrokenAt(0));
    };
    let mut prev = genesis(header);
    for (i, raw) in events.iter().enumerate() {
        let seq = i as u64 + 1;
        let parsed = std::str::from_utf8(raw).ok().and_then(|line| {
            let event = serde_json::from_str::<AuditEvent>(line).ok()?;
            let body = event.canonical_body();
            (line_with_digest(&body, &event.chain_digest) == line).then_some((event, body))
        });
        let Some((event, body)) = parsed else {
            return Some(ChainStatus::BrokenAt(seq));
        };
        if event.seq != seq {
            return Some(ChainStatus::BrokenAt(seq));
        }
        let digest = chain(&prev, &body);
        if hex::encode(digest) != event.chain_digest {
            return Some(ChainStatus::BrokenAt(seq));
        }
        prev = digest;
    }
    None
}

pub fn verify_chain(path: &Path) -> Result<ChainStatus, AuditError> {
    let bytes = std::fs::read(path)
        .map_err(|e| AuditError::UnreadableLog(format!("{}: {e}", path.display())))?;
    Ok(verify_chain_bytes(&bytes))
}

/// Parses the events of a log without verifying it.
pub fn read_events(bytes: &[u8]) -> Result<Vec<AuditEvent>, AuditError> {
    let text = std::str::from_utf8(bytes).map_err(|e| AuditError::UnreadableLog(e.to_string()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| AuditError::UnreadableLog(e.to_string())))
        .collect()
}

/// Human-readable rendering of a log for report writing.
pub fn render_text(bytes: &[u8]) -> Result<String, AuditError> {
    let events = read_events(bytes)?;
    let mut out = String::new();
    for e in events {
        let when = e.wall_time.as_deref().unwrap_or("-");
        let secs = e.offset_ns as f64 / 1e9;
        let details = e
            .payload
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={}", canonical_json(other)),
            })
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:>4}  {when}  +{secs:.3}s  {}  {details}\n",
            e.seq, e.kind
        ));
    }
    let status = verify_chain_bytes(bytes);
    out.push_str(&format!("chain: {status}\n"));
    Ok(out)
}

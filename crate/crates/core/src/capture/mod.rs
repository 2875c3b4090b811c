//! Frame capture from pcap replay files and receive-only live interfaces.
//!
//! Every source truncates frames to the snap length as it reads them, so no
//! octet beyond the snap length exists anywhere downstream.

mod live;
mod pcap;

use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dissect::{CapturedFrame, ETHERNET_HEADER_LEN};

pub use live::{
    LinkReceiver, LiveAdapter, MockAdapter, MockCall, PacketSocketAdapter, ReceivedFrame,
};
pub use pcap::{PcapReader, RawRecord, PCAP_MAGIC, PCAP_MAGIC_SWAPPED};

/// Headers only: 14 octets of Ethernet plus 20 of IPv4.
pub const DEFAULT_SNAP_LENGTH: u32 = 34;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("bad pcap magic {found:#010x}")]
    BadFileMagic { found: u32 },
    #[error("unsupported pcap link type {0} (only Ethernet is supported)")]
    UnsupportedLinkType(u32),
    #[error("malformed pcap file: {0}")]
    MalformedFile(String),
    #[error("interface not found: {0}")]
    InterfaceNotFound(String),
    #[error("permission denied opening {0}")]
    PermissionDenied(String),
    #[error("snap length {0} is below the {ETHERNET_HEADER_LEN}-octet Ethernet header")]
    InvalidSnapLength(u32),
    #[error("live capture is not supported on this platform")]
    Unsupported,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CaptureError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CaptureError::BadFileMagic { .. } => "BadFileMagic",
            CaptureError::UnsupportedLinkType(_) => "UnsupportedLinkType",
            CaptureError::MalformedFile(_) => "MalformedFile",
            CaptureError::InterfaceNotFound(_) => "InterfaceNotFound",
            CaptureError::PermissionDenied(_) => "PermissionDenied",
            CaptureError::InvalidSnapLength(_) => "InvalidSnapLength",
            CaptureError::Unsupported => "Unsupported",
            CaptureError::Io(_) => "SourceUnreadable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    LiveInterface(String),
    ReplayFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSource {
    pub kind: SourceKind,
    #[serde(default = "default_snap")]
    pub snap_length: u32,
    /// Replay only: pace frames by their recorded inter-arrival times.
    #[serde(default)]
    pub realtime: bool,
}

fn default_snap() -> u32 {
    DEFAULT_SNAP_LENGTH
}

impl CaptureSource {
    pub fn replay(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: SourceKind::ReplayFile(path.into()),
            snap_length: DEFAULT_SNAP_LENGTH,
            realtime: false,
        }
    }

    pub fn live(interface: impl Into<String>) -> Self {
        Self {
            kind: SourceKind::LiveInterface(interface.into()),
            snap_length: DEFAULT_SNAP_LENGTH,
            realtime: false,
        }
    }

    pub fn with_snap_length(mut self, snap_length: u32) -> Self {
        self.snap_length = snap_length;
        self
    }

    pub fn with_realtime(mut self, realtime: bool) -> Self {
        self.realtime = realtime;
        self
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        if (self.snap_length as usize) < ETHERNET_HEADER_LEN {
            return Err(CaptureError::InvalidSnapLength(self.snap_length));
        }
        Ok(())
    }
}

/// How a frame stream ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "terminal", content = "detail", rename_all = "snake_case")]
pub enum Terminal {
    EndOfFile,
    Stopped,
    SourceError(String),
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::EndOfFile => f.write_str("EndOfFile"),
            Terminal::Stopped => f.write_str("Stopped"),
            Terminal::SourceError(d) => write!(f, "SourceError({d})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    Frame(CapturedFrame),
    End(Terminal),
}

/// Cross-thread stop request for a frame stream. Cloning shares the signal.
#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<(Mutex<bool>, Condvar)>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        let (lock, cvar) = &*self.0;
        *lock.lock().unwrap_or_else(|e| e.into_inner()) = true;
        cvar.notify_all();
    }

    pub fn is_set(&self) -> bool {
        *self.0 .0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sleeps up to `timeout`; returns true if the signal fired.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let (lock, cvar) = &*self.0;
        let guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let (guard, _) = cvar
            .wait_timeout_while(guard, timeout, |set| !*set)
            .unwrap_or_else(|e| e.into_inner());
        *guard
    }
}

/// Supplies already-truncated frames to a [`FrameStream`].
///
/// `Ok(None)` means the source has nothing more to give; the stream decides
/// whether that is end-of-file or a stop based on the stop signal.
pub trait FrameProducer: Send {
    fn next_frame(&mut self, stop: &StopSignal) -> Result<Option<CapturedFrame>, String>;
}

struct VecProducer(std::vec::IntoIter<CapturedFrame>);

impl FrameProducer for VecProducer {
    fn next_frame(&mut self, _stop: &StopSignal) -> Result<Option<CapturedFrame>, String> {
        Ok(self.0.next())
    }
}

struct FilterProducer<F> {
    inner: Box<dyn FrameProducer>,
    keep: F,
}

impl<F: FnMut(&CapturedFrame) -> bool + Send> FrameProducer for FilterProducer<F> {
    fn next_frame(&mut self, stop: &StopSignal) -> Result<Option<CapturedFrame>, String> {
        while let Some(frame) = self.inner.next_frame(stop)? {
            if (self.keep)(&frame) {
                return Ok(Some(frame));
            }
            if stop.is_set() {
                return Ok(None);
            }
        }
        Ok(None)
    }
}

/// Ordered frames from one source, ending in exactly one [`Terminal`].
pub struct FrameStream {
    producer: Box<dyn FrameProducer>,
    stop: StopSignal,
    snap_length: u32,
    realtime: bool,
    pace_origin: Option<Instant>,
    last_offset: u64,
    terminal: Option<Terminal>,
}

impl fmt::Debug for FrameStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrameStream")
            .field("snap_length", &self.snap_length)
            .field("realtime", &self.realtime)
            .field("terminal", &self.terminal)
            .finish_non_exhaustive()
    }
}

impl FrameStream {
    pub fn new(producer: Box<dyn FrameProducer>, snap_length: u32, realtime: bool) -> Self {
        Self {
            producer,
            stop: StopSignal::new(),
            snap_length,
            realtime,
            pace_origin: None,
            last_offset: 0,
            terminal: None,
        }
    }

    /// An in-memory stream. Frames are re-truncated to `snap_length`.
    pub fn from_frames(frames: Vec<CapturedFrame>, snap_length: u32) -> Self {
        let frames = frames
            .into_iter()
            .map(|f| {
                CapturedFrame::new(
                    f.capture_offset_ns(),
                    f.original_length(),
                    f.data().to_vec(),
                    snap_length,
                )
            })
            .collect::<Vec<_>>();
        Self::new(
            Box::new(VecProducer(frames.into_iter())),
            snap_length,
            false,
        )
    }

    /// Keeps only frames for which `keep` returns true, preserving order.
    pub fn filter_frames<F>(mut self, keep: F) -> Self
    where
        F: FnMut(&CapturedFrame) -> bool + Send + 'static,
    {
        let inner = std::mem::replace(
            &mut self.producer,
            Box::new(VecProducer(Vec::new().into_iter())),
        );
        self.producer = Box::new(FilterProducer { inner, keep });
        self
    }

    pub fn snap_length(&self) -> u32 {
        self.snap_length
    }

    pub fn stop_handle(&self) -> StopSignal {
        self.stop.clone()
    }

    /// Requests termination. Idempotent; a stream that already ended keeps
    /// its original terminal marker.
    pub fn stop(&self) {
        self.stop.trigger();
    }

    pub fn terminal(&self) -> Option<&Terminal> {
        self.terminal.as_ref()
    }

    fn finish(&mut self, terminal: Terminal) -> StreamEvent {
        self.terminal = Some(terminal.clone());
        StreamEvent::End(terminal)
    }

    pub fn next_event(&mut self) -> StreamEvent {
        if let Some(t) = &self.terminal {
            return StreamEvent::End(t.clone());
        }
        if self.stop.is_set() {
            return self.finish(Terminal::Stopped);
        }
        match self.producer.next_frame(&self.stop) {
            Ok(Some(mut frame)) => {
                assert!(
                    frame.data().len() <= self.snap_length as usize,
                    "producer emitted {} octets over snap length {}",
                    frame.data().len(),
                    self.snap_length
                );
                // Out-of-order source timestamps are clamped so offsets never go backwards.
                if frame.capture_offset_ns() < self.last_offset {
                    frame = CapturedFrame::new(
                        self.last_offset,
                        frame.original_length(),
                        frame.data().to_vec(),
                        self.snap_length,
                    );
                }
                self.last_offset = frame.capture_offset_ns();
                if self.realtime && !self.pace(frame.capture_offset_ns()) {
                    return self.finish(Terminal::Stopped);
                }
                if self.stop.is_set() {
                    return self.finish(Terminal::Stopped);
                }
                StreamEvent::Frame(frame)
            }
            Ok(None) if self.stop.is_set() => self.finish(Terminal::Stopped),
            Ok(None) => self.finish(Terminal::EndOfFile),
            Err(detail) => {
                tracing::warn!(%detail, "capture source failed");
                self.finish(Terminal::SourceError(detail))
            }
        }
    }

    /// Waits until the frame's offset has elapsed since the first frame.
    /// Returns false if stopped while waiting.
    fn pace(&mut self, offset_ns: u64) -> bool {
        let origin = *self.pace_origin.get_or_insert_with(Instant::now);
        let due = origin + Duration::from_nanos(offset_ns);
        let now = Instant::now();
        if due <= now {
            return true;
        }
        !self.stop.wait_timeout(due - now)
    }
}

impl Iterator for FrameStream {
    type Item = CapturedFrame;

    fn next(&mut self) -> Option<CapturedFrame> {
        match self.next_event() {
            StreamEvent::Frame(f) => Some(f),
            StreamEvent::End(_) => None,
        }
    }
}

/// Opens a source using the platform's packet-socket adapter for live capture.
pub fn open_source(source: &CaptureSource) -> Result<FrameStream, CaptureError> {
    open_source_with(source, &PacketSocketAdapter)
}

/// Opens a source, using `adapter` for live interfaces.
///
/// Failures detectable at open time (missing file, bad magic, unknown
/// interface, missing privileges) are returned here. Failures part-way
/// through a file end the stream with [`Terminal::SourceError`].
pub fn open_source_with(
    source: &CaptureSource,
    adapter: &dyn LiveAdapter,
) -> Result<FrameStream, CaptureError> {
    source.validate()?;
    match &source.kind {
        SourceKind::ReplayFile(path) => {
            let file = std::fs::File::open(path)?;
            let reader = PcapReader::new(std::io::BufReader::new(file))?;
            Ok(FrameStream::new(
                Box::new(pcap::ReplayProducer::new(reader, source.snap_length)),
                source.snap_length,
                source.realtime,
            ))
        }
        SourceKind::LiveInterface(name) => {
            let receiver = adapter.open_receive_only(name, source.snap_length)?;
            Ok(FrameStream::new(
                Box::new(live::LiveProducer::new(receiver, source.snap_length)),
                source.snap_length,
                false,
            ))
        }
    }
}

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::{NaiveDateTime, Timelike};

/// Source of elapsed nanoseconds. Never goes backwards.
pub trait MonotonicClock: Send + Sync {
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl MonotonicClock for SystemClock {
    fn now_ns(&self) -> u64 {
        u64::try_from(self.origin.elapsed().as_nanos()).unwrap_or(u64::MAX)
    }
}

/// Hand-driven clock for tests and simulations.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, ns: u64) {
        self.0.fetch_max(ns, Ordering::SeqCst);
    }

    pub fn advance(&self, ns: u64) {
        self.0.fetch_add(ns, Ordering::SeqCst);
    }
}

impl MonotonicClock for ManualClock {
    fn now_ns(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Operator-entered wall time plus elapsed monotonic time.
///
/// The host clock is never set. Wall time for an event is the entered
/// anchor plus the monotonic time elapsed since the anchor was entered.
#[derive(Clone)]
pub struct SessionClock {
    wall_anchor: Option<NaiveDateTime>,
    monotonic_anchor_ns: u64,
    clock: Arc<dyn MonotonicClock>,
}

impl fmt::Debug for SessionClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionClock")
            .field("wall_anchor", &self.wall_anchor)
            .field("monotonic_anchor_ns", &self.monotonic_anchor_ns)
            .finish()
    }
}

impl SessionClock {
    /// Anchors at the clock's current reading. The entered time is kept at
    /// minute resolution, which is all the operator is asked for.
    pub fn anchored(entered: Option<NaiveDateTime>, clock: Arc<dyn MonotonicClock>) -> Self {
        let wall_anchor = entered.map(truncate_to_minute);
        Self {
            wall_anchor,
            monotonic_anchor_ns: clock.now_ns(),
            clock,
        }
    }

    pub fn wall_anchor(&self) -> Option<NaiveDateTime> {
        self.wall_anchor
    }

    pub fn monotonic_anchor_ns(&self) -> u64 {
        self.monotonic_anchor_ns
    }

    pub fn offset_ns(&self) -> u64 {
        self.clock.now_ns().saturating_sub(self.monotonic_anchor_ns)
    }

    pub fn wall_time_at(&self, offset_ns: u64) -> Option<NaiveDateTime> {
        let anchor = self.wall_anchor?;
        let delta = chrono::Duration::nanoseconds(i64::try_from(offset_ns).unwrap_or(i64::MAX));
        anchor.checked_add_signed(delta)
    }
}

fn truncate_to_minute(t: NaiveDateTime) -> NaiveDateTime {
    t.with_second(0)
        .and_then(|t| t.with_nanosecond(0))
        .unwrap_or(t)
}

pub const WALL_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.3f";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unrecognised date-time {0:?}; expected YYYY-MM-DD HH:MM")]
pub struct TimeParseError(String);

/// Parses an operator-entered date-time such as `2015-06-01 12:00`.
pub fn parse_entered_time(text: &str) -> Result<NaiveDateTime, TimeParseError> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
    ];
    let text = text.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
        .map(truncate_to_minute)
        .ok_or_else(|| TimeParseError(text.to_string()))
}

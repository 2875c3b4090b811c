//! Passive server identification from a receive-only Ethernet tap.
//!
//! Frames come from a pcap replay or a live receive-only interface and are
//! cut to a header-only snap length (34 octets by default) as they are
//! read. Identification plugins run over the resulting stream:
//!
//! - `source_addr` lists every unique upstream (MAC, IP) source pair;
//! - `known_ip` reveals only how many frames carried one operator-supplied
//!   source address, out of how many seen.
//!
//! Every operator action is committed to a hash-chained audit trail whose
//! timestamps come from an operator-entered wall time plus elapsed
//! monotonic time. Results of runs marked irrelevant are destroyed and only
//! a destruction record is kept.
//!
//! [`tap`] models the physical tap: link loss, attachment gaps, signal
//! attenuation and the insertion-loss budget.

pub mod audit;
pub mod capture;
pub mod config;
pub mod dissect;
pub mod plugin;
pub mod session;
pub mod tap;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use capture::{open_source, CaptureSource, FrameStream, Terminal};
pub use dissect::{extract_source_pair, CapturedFrame, IpSourceView, MacAddr, SourcePair};
pub use plugin::{PluginResult, Registry};
pub use session::{RunOrigin, RunState, RunStatus, Session, SessionError, Verdict};

//! Classic pcap reader (microsecond timestamps, Ethernet link type).
//!
//! Layout: a 24-octet global header (magic, version major/minor, thiszone,
//! sigfigs, snaplen, network) followed by records, each a 16-octet header
//! (ts_sec, ts_usec, incl_len, orig_len) and `incl_len` octets of data.

use std::io::{self, Read};

use super::{CaptureError, FrameProducer, StopSignal};
use crate::dissect::CapturedFrame;

pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
pub const PCAP_MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Upper bound on a single record; anything larger is treated as corruption.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub ts_ns: u64,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

pub struct PcapReader<R> {
    input: R,
    swapped: bool,
    file_snaplen: u32,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut input: R) -> Result<Self, CaptureError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut input, &mut header)?;
        if got < 4 {
            let mut m = [0u8; 4];
            m[..got].copy_from_slice(&header[..got]);
            return Err(CaptureError::BadFileMagic {
                found: u32::from_le_bytes(m),
            });
        }
        let magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let swapped = match magic {
            PCAP_MAGIC => false,
            PCAP_MAGIC_SWAPPED => true,
            other => return Err(CaptureError::BadFileMagic { found: other }),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(CaptureError::MalformedFile(format!(
                "global header is {got} octets"
            )));
        }
        let field = |at: usize| {
            let b = [header[at], header[at + 1], header[at + 2], header[at + 3]];
            if swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let network = field(20);
        if network != LINKTYPE_ETHERNET {
            return Err(CaptureError::UnsupportedLinkType(network));
        }
        Ok(Self {
            input,
            swapped,
            file_snaplen: field(16),
        })
    }

    pub fn file_snaplen(&self) -> u32 {
        self.file_snaplen
    }

    /// Reads the next record, keeping at most `keep` octets of its data.
    /// The remaining octets are consumed from the input but never stored.
    pub fn next_record(&mut self, keep: usize) -> Result<Option<RawRecord>, CaptureError> {
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        match read_full(&mut self.input, &mut hdr)? {
            0 => return Ok(None),
            RECORD_HEADER_LEN => {}
            n => {
                return Err(CaptureError::MalformedFile(format!(
                    "record header cut short at {n} octets"
                )))
            }
        }
        let field = |at: usize| {
            let b = [hdr[at], hdr[at + 1], hdr[at + 2], hdr[at + 3]];
            if self.swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let (ts_sec, ts_usec, incl_len, orig_len) = (field(0), field(4), field(8), field(12));
        if incl_len > MAX_RECORD_LEN {
            return Err(CaptureError::MalformedFile(format!(
                "record length {incl_len} exceeds limit"
            )));
        }
        let stored = (incl_len as usize).min(keep);
        let mut data = vec![0u8; stored];
        if read_full(&mut self.input, &mut data)? != stored {
            return Err(CaptureError::MalformedFile("record data cut short".into()));
        }
        let rest = u64::from(incl_len) - stored as u64;
        if rest > 0 && io::copy(&mut (&mut self.input).take(rest), &mut io::sink())? != rest {
            return Err(CaptureError::MalformedFile("record data cut short".into()));
        }
        Ok(Some(RawRecord {
            ts_ns: u64::from(ts_sec) * 1_000_000_000 + u64::from(ts_usec) * 1_000,
            orig_len: orig_len.max(incl_len),
            data,
        }))
    }
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Replays a pcap file with offsets rebased so the first frame is at 0.
pub(super) struct ReplayProducer<R> {
    reader: PcapReader<R>,
    snap_length: u32,
    base_ns: Option<u64>,
}

impl<R> ReplayProducer<R> {
    pub(super) fn new(reader: PcapReader<R>, snap_length: u32) -> Self {
        Self {
            reader,
            snap_length,
            base_ns: None,
        }
    }
}

impl<R: Read + Send> FrameProducer for ReplayProducer<R> {
    fn next_frame(&mut self, _stop: &StopSignal) -> Result<Option<CapturedFrame>, String> {
        let record = match self.reader.next_record(self.snap_length as usize) {
            Ok(Some(r)) => r,
            Ok(None) => return Ok(None),
            Err(e) => return Err(e.to_string()),
        };
        let base = *self.base_ns.get_or_insert(record.ts_ns);
        Ok(Some(CapturedFrame::new(
            record.ts_ns.saturating_sub(base),
            record.orig_len,
            record.data,
            self.snap_length,
        )))
    }
}

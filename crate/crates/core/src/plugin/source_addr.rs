//! Lists every unique upstream (MAC, IP) source pair seen on the tap.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    ip_to_text, ParamMap, Plugin, PluginDescriptor, PluginFactory, PluginResult, ResultKind,
};
use crate::dissect::{extract_source_pair, CapturedFrame, IpSourceView, MacAddr, SourcePair};

pub const SOURCE_ADDR_ID: &str = "source_addr";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAddressRecord {
    pub src_mac: MacAddr,
    /// Absent for frames without an IP header (ARP and other EtherTypes).
    pub src_ip: Option<IpSourceView>,
    pub packet_count: u64,
    pub first_seen_offset_ns: u64,
}

/// Unique source pairs plus frame accounting. Records are kept in
/// first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAddrResult {
    pub records: Vec<SourceAddressRecord>,
    pub total_frames: u64,
    pub undecodable_frames: u64,
}

impl SourceAddrResult {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                r.src_mac,
                ip_to_text(r.src_ip.as_ref()),
                r.packet_count
            );
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct SourceAddr {
    state: SourceAddrResult,
    index: HashMap<(MacAddr, Option<IpSourceView>), usize>,
}

impl SourceAddr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &SourceAddrResult {
        &self.state
    }
}

impl Plugin for SourceAddr {
    fn observe(&mut self, frame: &CapturedFrame) {
        self.state.total_frames += 1;
        match extract_source_pair(frame) {
            SourcePair::Decoded { mac, ip } => {
                let records = &mut self.state.records;
                let idx = *self.index.entry((mac, ip)).or_insert_with(|| {
                    records.push(SourceAddressRecord {
                        src_mac: mac,
                        src_ip: ip,
                        packet_count: 0,
                        first_seen_offset_ns: frame.capture_offset_ns(),
                    });
                    records.len() - 1
                });
                self.state.records[idx].packet_count += 1;
            }
            SourcePair::Undecodable => self.state.undecodable_frames += 1,
        }
    }

    fn snapshot(&self) -> PluginResult {
        PluginResult::AddressList(self.state.clone())
    }

    /// Records ordered by first-seen offset; ties keep insertion order.
    fn finalize(&self) -> PluginResult {
        let mut state = self.state.clone();
        state.records.sort_by_key(|r| r.first_seen_offset_ns);
        PluginResult::AddressList(state)
    }

    fn scrub(&mut self) {
        self.index.clear();
        let mut result = PluginResult::AddressList(std::mem::take(&mut self.state));
        result.scrub();
    }
}

pub struct SourceAddrFactory;

impl PluginFactory for SourceAddrFactory {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor {
            id: SOURCE_ADDR_ID.into(),
            display_name: "SourceAddr".into(),
            parameters: Vec::new(),
            result_kind: ResultKind::AddressList,
        }
    }

    fn instantiate(&self, _params: &ParamMap) -> Box<dyn Plugin> {
        Box::new(SourceAddr::new())
    }
}

//! Confirms the presence of one operator-supplied address by tally alone.
//!
//! No address other than the one the operator entered is ever stored in
//! this plugin's state, so nothing else can leak into its results.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    ParamMap, ParamValue, ParameterSpec, Plugin, PluginDescriptor, PluginFactory, PluginResult,
    ResultKind, ValueType,
};
use crate::dissect::{extract_source_pair, CapturedFrame, IpSourceView, SourcePair};

pub const KNOWN_IP_ID: &str = "known_ip";
pub const KNOWN_ADDRESS_PARAM: &str = "known_address";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchTally {
    pub known_address: IpSourceView,
    pub matched: u64,
    pub total: u64,
}

impl MatchTally {
    pub fn new(known_address: IpSourceView) -> Self {
        Self {
            known_address,
            matched: 0,
            total: 0,
        }
    }

    /// At least one frame carried the known source address.
    pub fn identified(&self) -> bool {
        self.matched >= 1
    }
}

impl fmt::Display for MatchTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "matched={} total={} address={}",
            self.matched, self.total, self.known_address
        )
    }
}

#[derive(Debug, Clone)]
pub struct KnownIp {
    tally: MatchTally,
}

impl KnownIp {
    pub fn new(known_address: IpSourceView) -> Self {
        Self {
            tally: MatchTally::new(known_address),
        }
    }

    pub fn tally(&self) -> MatchTally {
        self.tally
    }
}

impl Plugin for KnownIp {
    fn observe(&mut self, frame: &CapturedFrame) {
        self.tally.total += 1;
        if let SourcePair::Decoded { ip: Some(ip), .. } = extract_source_pair(frame) {
            if ip == self.tally.known_address {
                self.tally.matched += 1;
            }
        }
    }

    fn snapshot(&self) -> PluginResult {
        PluginResult::MatchTally(self.tally)
    }

    fn finalize(&self) -> PluginResult {
        PluginResult::MatchTally(self.tally)
    }

    fn scrub(&mut self) {
        self.tally.matched = 0;
        self.tally.total = 0;
    }
}

pub struct KnownIpFactory;

impl PluginFactory for KnownIpFactory {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor {
            id: KNOWN_IP_ID.into(),
            display_name: "KnownIP".into(),
            parameters: vec![ParameterSpec {
                name: KNOWN_ADDRESS_PARAM.into(),
                value_type: ValueType::IpAddress,
                required: true,
            }],
            result_kind: ResultKind::MatchTally,
        }
    }

    fn instantiate(&self, params: &ParamMap) -> Box<dyn Plugin> {
        let Some(ParamValue::IpAddress(addr)) = params.get(KNOWN_ADDRESS_PARAM) else {
            panic!("known_ip instantiated without a validated {KNOWN_ADDRESS_PARAM}");
        };
        Box::new(KnownIp::new((*addr).into()))
    }
}

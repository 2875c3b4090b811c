//! Identification plugins and their registry.
//!
//! A plugin declares the parameters it needs; the framework validates the
//! operator's input against that declaration before the plugin ever sees
//! it, so only validated values reach plugins and the audit trail.

mod known_ip;
mod source_addr;

use std::collections::BTreeMap;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dissect::{CapturedFrame, IpSourceView, MacAddr};

pub use known_ip::{KnownIp, KnownIpFactory, MatchTally, KNOWN_ADDRESS_PARAM, KNOWN_IP_ID};
pub use source_addr::{
    SourceAddr, SourceAddrFactory, SourceAddrResult, SourceAddressRecord, SOURCE_ADDR_ID,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PluginError {
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("duplicate plugin id {0:?}")]
    DuplicatePluginId(String),
    #[error("missing required parameter {0:?}")]
    MissingParameter(String),
    #[error("invalid value for parameter {0:?}")]
    InvalidParameterValue(String),
    #[error("plugin does not take a parameter named {0:?}")]
    UnknownParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueType {
    IpAddress,
    Text,
    UnsignedInteger,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub value_type: ValueType,
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResultKind {
    AddressList,
    MatchTally,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub id: String,
    pub display_name: String,
    pub parameters: Vec<ParameterSpec>,
    pub result_kind: ResultKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    IpAddress(IpAddr),
    UnsignedInteger(u64),
    Text(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::IpAddress(a) => a.fmt(f),
            ParamValue::UnsignedInteger(n) => n.fmt(f),
            ParamValue::Text(t) => f.write_str(t),
        }
    }
}

pub type ParamMap = BTreeMap<String, ParamValue>;

/// Checks operator input against a descriptor and converts it to typed values.
pub fn validate_params(
    desc: &PluginDescriptor,
    raw: &BTreeMap<String, String>,
) -> Result<ParamMap, PluginError> {
    if let Some(unknown) = raw
        .keys()
        .find(|k| !desc.parameters.iter().any(|p| &p.name == *k))
    {
        return Err(PluginError::UnknownParameter(unknown.clone()));
    }
    let mut out = ParamMap::new();
    for spec in &desc.parameters {
        let Some(text) = raw.get(&spec.name) else {
            if spec.required {
                return Err(PluginError::MissingParameter(spec.name.clone()));
            }
            continue;
        };
        let text = text.trim();
        let invalid = || PluginError::InvalidParameterValue(spec.name.clone());
        let value = match spec.value_type {
            ValueType::IpAddress => ParamValue::IpAddress(text.parse().map_err(|_| invalid())?),
            ValueType::UnsignedInteger => {
                ParamValue::UnsignedInteger(text.parse().map_err(|_| invalid())?)
            }
            ValueType::Text => ParamValue::Text(text.to_string()),
        };
        out.insert(spec.name.clone(), value);
    }
    Ok(out)
}

/// Final or live result of a plugin run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PluginResult {
    AddressList(SourceAddrResult),
    MatchTally(MatchTally),
}

impl PluginResult {
    pub fn total_frames(&self) -> u64 {
        match self {
            PluginResult::AddressList(r) => r.total_frames,
            PluginResult::MatchTally(t) => t.total,
        }
    }

    /// Number of result records held (address rows, or the single tally).
    pub fn record_count(&self) -> u64 {
        match self {
            PluginResult::AddressList(r) => r.records.len() as u64,
            PluginResult::MatchTally(_) => 1,
        }
    }

    /// Text form: one `MAC<TAB>IP<TAB>count` line per address record, or a
    /// single `matched=<n> total=<m> address=<known>` line.
    pub fn to_text(&self) -> String {
        match self {
            PluginResult::AddressList(r) => r.to_text(),
            PluginResult::MatchTally(t) => format!("{t}\n"),
        }
    }

    /// Overwrites held identifying data before release.
    pub fn scrub(&mut self) {
        match self {
            PluginResult::AddressList(r) => {
                for rec in r.records.iter_mut() {
                    rec.src_mac = MacAddr::default();
                    rec.src_ip = None;
                }
                r.records.clear();
                r.records.shrink_to_fit();
            }
            PluginResult::MatchTally(t) => {
                t.matched = 0;
                t.total = 0;
            }
        }
    }
}

/// A running identification method. Called from one thread only.
pub trait Plugin: Send {
    fn observe(&mut self, frame: &CapturedFrame);
    /// Cheap view of current counters for live display.
    fn snapshot(&self) -> PluginResult;
    fn finalize(&self) -> PluginResult;
    /// Destroys all held identifying data.
    fn scrub(&mut self);
}

pub trait PluginFactory: Send + Sync {
    fn descriptor(&self) -> PluginDescriptor;
    /// `params` has already passed [`validate_params`] for this descriptor.
    fn instantiate(&self, params: &ParamMap) -> Box<dyn Plugin>;
}

/// Static set of available plugins, keyed by unique id.
pub struct Registry {
    factories: Vec<Box<dyn PluginFactory>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.factories.iter().map(|p| p.descriptor().id))
            .finish()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            factories: Vec::new(),
        }
    }

    /// The built-in `source_addr` and `known_ip` plugins.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(SourceAddrFactory))
            .expect("built-in ids are unique");
        r.register(Box::new(KnownIpFactory))
            .expect("built-in ids are unique");
        r
    }

    pub fn register(&mut self, factory: Box<dyn PluginFactory>) -> Result<(), PluginError> {
        let id = factory.descriptor().id;
        if self.factories.iter().any(|f| f.descriptor().id == id) {
            return Err(PluginError::DuplicatePluginId(id));
        }
        self.factories.push(factory);
        Ok(())
    }

    pub fn enumerate(&self) -> Vec<PluginDescriptor> {
        self.factories.iter().map(|f| f.descriptor()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&dyn PluginFactory, PluginError> {
        self.factories
            .iter()
            .find(|f| f.descriptor().id == id)
            .map(|f| f.as_ref())
            .ok_or_else(|| PluginError::UnknownPlugin(id.to_string()))
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

pub(crate) fn ip_to_text(ip: Option<&IpSourceView>) -> String {
    ip.map_or_else(|| "-".to_string(), ToString::to_string)
}

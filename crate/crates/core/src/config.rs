//! Key-value configuration documents (TOML): parameter files for plugin
//! runs and tap loss profiles.
//!
//! A parameter file is a flat table, e.g. `known_address = "192.0.2.7"`.
//! A profile looks like:
//!
//! ```toml
//! link_loss_probability = 0.0001
//! rng_seed = 7
//! observation_gaps = [[0, 1000000], [5000000, 6000000]]
//! # or, instead of explicit gaps:
//! # alternations = 102
//! # duration_ns = 108000000000
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::tap::{alternating_gaps, TapError, TapLossProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid document {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Profile(#[from] TapError),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a flat table of parameter assignments. Values may be strings,
/// integers or booleans; all are passed on as text for validation.
pub fn parse_params(text: &str, origin: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
    table
        .into_iter()
        .map(|(k, v)| {
            let text = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(ConfigError::Parse {
                        path: origin.into(),
                        message: format!(
                            "parameter {k:?} must be a scalar, got {}",
                            other.type_str()
                        ),
                    })
                }
            };
            Ok((k, text))
        })
        .collect()
}

pub fn load_params(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    parse_params(&read(path)?, &path.display().to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileDoc {
    link_loss_probability: Option<f64>,
    /// Loss per request/response exchange; converted to a per-frame rate.
    exchange_loss_probability: Option<f64>,
    #[serde(default)]
    rng_seed: u64,
    #[serde(default)]
    observation_gaps: Vec<(u64, u64)>,
    alternations: Option<u32>,
    duration_ns: Option<u64>,
}

pub fn parse_profile(text: &str, origin: &str) -> Result<TapLossProfile, ConfigError> {
    let doc: ProfileDoc = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.into(),
        message: e.to_string(),
    })?;
    let parse_err = |message: &str| ConfigError::Parse {
        path: origin.into(),
        message: message.into(),
    };
    let mut profile = match (doc.link_loss_probability, doc.exchange_loss_probability) {
        (Some(_), Some(_)) => {
            return Err(parse_err(
                "set link_loss_probability or exchange_loss_probability, not both",
            ))
        }
        (Some(p), None) => TapLossProfile::new(p, Vec::new(), doc.rng_seed)?,
        (None, Some(q)) => TapLossProfile::calibrated_for_exchange_loss(q, doc.rng_seed)?,
        (None, None) => TapLossProfile::new(0.0, Vec::new(), doc.rng_seed)?,
    };
    let gaps = match (doc.alternations, doc.duration_ns) {
        (Some(_), _) if !doc.observation_gaps.is_empty() => {
            return Err(parse_err("set observation_gaps or alternations, not both"))
        }
        (Some(n), Some(d)) => alternating_gaps(d, n),
        (Some(_), None) => return Err(parse_err("alternations needs duration_ns")),
        (None, _) => doc.observation_gaps,
    };
    profile = profile.with_gaps(gaps)?;
    Ok(profile)
}

pub fn load_profile(path: &Path) -> Result<TapLossProfile, ConfigError> {
    parse_profile(&read(path)?, &path.display().to_string())
}

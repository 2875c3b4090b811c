//! Ethernet and IP header dissection over truncated frames.
//!
//! Only the link-layer header (with at most one 802.1Q tag) and the fixed
//! part of the IP header are ever read. Nothing past the IP source address
//! region is touched, which is what makes the 34-octet snap length safe.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const VLAN_TAG_LEN: usize = 4;
pub const IPV4_HEADER_LEN: usize = 20;
pub const IPV6_HEADER_LEN: usize = 40;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETHERTYPE_IPV6: u16 = 0x86DD;

/// Values below this in the type/length field are 802.3 lengths, not EtherTypes.
pub const ETHERTYPE_MIN: u16 = 0x0600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkType {
    Ethernet,
}

/// A captured link-layer frame, already truncated to the source's snap length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    capture_offset_ns: u64,
    original_length: u32,
    data: Vec<u8>,
    link_type: LinkType,
}

impl CapturedFrame {
    /// Builds a frame, truncating `data` to `snap_length`.
    ///
    /// `original_length` is raised to at least the stored length so that a
    /// frame never claims to be shorter on the wire than what was kept.
    pub fn new(
        capture_offset_ns: u64,
        original_length: u32,
        mut data: Vec<u8>,
        snap_length: u32,
    ) -> Self {
        data.truncate(snap_length as usize);
        let original_length = original_length.max(data.len() as u32);
        Self {
            capture_offset_ns,
            original_length,
            data,
            link_type: LinkType::Ethernet,
        }
    }

    pub fn capture_offset_ns(&self) -> u64 {
        self.capture_offset_ns
    }

    pub fn original_length(&self) -> u32 {
        self.original_length
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn link_type(&self) -> LinkType {
        self.link_type
    }
}

/// A 48-bit hardware address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub fn octets(&self) -> [u8; 6] {
        self.0
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacAddr({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid MAC address: {0}")]
pub struct MacParseError(String);

impl FromStr for MacAddr {
    type Err = MacParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split([':', '-']);
        for slot in out.iter_mut() {
            let part = parts.next().ok_or_else(|| MacParseError(s.to_string()))?;
            if part.len() != 2 {
                return Err(MacParseError(s.to_string()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| MacParseError(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(MacParseError(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EthernetHeaderView {
    pub dst_mac: MacAddr,
    pub src_mac: MacAddr,
    /// Inner EtherType when a VLAN tag was skipped.
    pub ethertype: u16,
    pub vlan_id: Option<u16>,
}

impl EthernetHeaderView {
    /// Offset of the network-layer header within the frame.
    pub fn payload_offset(&self) -> usize {
        match self.vlan_id {
            Some(_) => ETHERNET_HEADER_LEN + VLAN_TAG_LEN,
            None => ETHERNET_HEADER_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IpVersion {
    V4,
    V6,
}

/// The source address of an IP header. Equality is version-sensitive:
/// `192.0.2.7` never equals `::ffff:192.0.2.7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IpSourceView(IpAddr);

impl IpSourceView {
    pub fn new(addr: IpAddr) -> Self {
        Self(addr)
    }

    pub fn version(&self) -> IpVersion {
        match self.0 {
            IpAddr::V4(_) => IpVersion::V4,
            IpAddr::V6(_) => IpVersion::V6,
        }
    }

    pub fn addr(&self) -> IpAddr {
        self.0
    }

    /// Raw network-order octets (4 or 16).
    pub fn octets(&self) -> Vec<u8> {
        match self.0 {
            IpAddr::V4(a) => a.octets().to_vec(),
            IpAddr::V6(a) => a.octets().to_vec(),
        }
    }
}

impl From<IpAddr> for IpSourceView {
    fn from(addr: IpAddr) -> Self {
        Self(addr)
    }
}

impl From<Ipv4Addr> for IpSourceView {
    fn from(addr: Ipv4Addr) -> Self {
        Self(IpAddr::V4(addr))
    }
}

impl From<Ipv6Addr> for IpSourceView {
    fn from(addr: Ipv6Addr) -> Self {
        Self(IpAddr::V6(addr))
    }
}

impl fmt::Display for IpSourceView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DissectError {
    #[error("frame too short for an Ethernet header ({len} octets)")]
    TooShort { len: usize },
    #[error("not an IP frame (ethertype {ethertype:#06x})")]
    NotIp { ethertype: u16 },
    #[error("IP header truncated: need {needed} octets, have {len}")]
    Truncated { needed: usize, len: usize },
}

/// Result of reducing one frame to its upstream source identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourcePair {
    /// A decodable Ethernet header. `ip` is absent for non-IP EtherTypes.
    Decoded {
        mac: MacAddr,
        ip: Option<IpSourceView>,
    },
    /// The frame could not be decoded far enough to be attributed.
    Undecodable,
}

/// Read access to frame octets. Parsing goes through this so tests can
/// substitute a buffer that records how far into the frame was read.
pub(crate) trait HeaderBytes {
    fn available(&self) -> usize;
    fn read(&self, start: usize, end: usize) -> &[u8];
}

impl HeaderBytes for [u8] {
    fn available(&self) -> usize {
        self.len()
    }

    fn read(&self, start: usize, end: usize) -> &[u8] {
        &self[start..end]
    }
}

fn read_u16<B: HeaderBytes + ?Sized>(buf: &B, at: usize) -> u16 {
    let b = buf.read(at, at + 2);
    u16::from_be_bytes([b[0], b[1]])
}

pub(crate) fn parse_ethernet_bytes<B: HeaderBytes + ?Sized>(
    buf: &B,
) -> Result<EthernetHeaderView, DissectError> {
    let len = buf.available();
    if len < ETHERNET_HEADER_LEN {
        return Err(DissectError::TooShort { len });
    }
    let mut dst = [0u8; 6];
    let mut src = [0u8; 6];
    dst.copy_from_slice(buf.read(0, 6));
    src.copy_from_slice(buf.read(6, 12));
    let outer = read_u16(buf, 12);
    let (ethertype, vlan_id) = if outer == ETHERTYPE_VLAN {
        if len < ETHERNET_HEADER_LEN + VLAN_TAG_LEN {
            return Err(DissectError::TooShort { len });
        }
        let tci = read_u16(buf, 14);
        (read_u16(buf, 16), Some(tci & 0x0fff))
    } else {
        (outer, None)
    };
    Ok(EthernetHeaderView {
        dst_mac: MacAddr(dst),
        src_mac: MacAddr(src),
        ethertype,
        vlan_id,
    })
}

pub(crate) fn parse_ip_source_bytes<B: HeaderBytes + ?Sized>(
    buf: &B,
    eth: &EthernetHeaderView,
) -> Result<IpSourceView, DissectError> {
    let base = eth.payload_offset();
    let len = buf.available();
    match eth.ethertype {
        ETHERTYPE_IPV4 => {
            let needed = base + IPV4_HEADER_LEN;
            if len < needed {
                return Err(DissectError::Truncated { needed, len });
            }
            let mut a = [0u8; 4];
            a.copy_from_slice(buf.read(base + 12, base + 16));
            Ok(Ipv4Addr::from(a).into())
        }
        ETHERTYPE_IPV6 => {
            let needed = base + IPV6_HEADER_LEN;
            if len < needed {
                return Err(DissectError::Truncated { needed, len });
            }
            let mut a = [0u8; 16];
            a.copy_from_slice(buf.read(base + 8, base + 24));
            Ok(Ipv6Addr::from(a).into())
        }
        // Includes 802.3 length values (< 0x0600) and everything non-IP.
        other => Err(DissectError::NotIp { ethertype: other }),
    }
}

pub(crate) fn extract_source_pair_bytes<B: HeaderBytes + ?Sized>(buf: &B) -> SourcePair {
    let eth = match parse_ethernet_bytes(buf) {
        Ok(eth) => eth,
        Err(_) => return SourcePair::Undecodable,
    };
    match parse_ip_source_bytes(buf, &eth) {
        Ok(ip) => SourcePair::Decoded {
            mac: eth.src_mac,
            ip: Some(ip),
        },
        Err(DissectError::NotIp { .. }) => SourcePair::Decoded {
            mac: eth.src_mac,
            ip: None,
        },
        Err(_) => SourcePair::Undecodable,
    }
}

/// Decodes the Ethernet header, skipping at most one 802.1Q tag.
pub fn parse_ethernet(frame: &CapturedFrame) -> Result<EthernetHeaderView, DissectError> {
    parse_ethernet_bytes(frame.data())
}

/// Reads the IP source address for IPv4 (header octets 12..16) or IPv6
/// (header octets 8..24). IPv4 options are irrelevant here because the
/// source address sits at a fixed offset, so IHL is not inspected.
pub fn parse_ip_source(
    frame: &CapturedFrame,
    eth: &EthernetHeaderView,
) -> Result<IpSourceView, DissectError> {
    parse_ip_source_bytes(frame.data(), eth)
}

/// Total over all inputs: decode failures come back as
/// [`SourcePair::Undecodable`], never as a panic.
///
/// A frame whose IP header is cut off by the snap length is undecodable,
/// not a MAC-only record: its IP identity exists but could not be read.
pub fn extract_source_pair(frame: &CapturedFrame) -> SourcePair {
    extract_source_pair_bytes(frame.data())
}

//! Frame builders and pcap fixture writers for tests.
//!
//! The builder lays out octets by hand from field values. It shares no code
//! with the dissector, so parsed fields can be compared against the values
//! the builder was given.

use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dissect::MacAddr;

const FILLER: u8 = 0x5a;

#[derive(Debug, Clone)]
enum Network {
    V4 {
        src: Ipv4Addr,
        dst: Ipv4Addr,
        ihl: u8,
    },
    V6 {
        src: Ipv6Addr,
        dst: Ipv6Addr,
    },
    Arp {
        sender_ip: Ipv4Addr,
        target_ip: Ipv4Addr,
    },
    Raw {
        ethertype: u16,
    },
}

#[derive(Debug, Clone)]
pub struct FrameBuilder {
    dst_mac: MacAddr,
    src_mac: MacAddr,
    vlan: Option<u16>,
    network: Network,
    frame_len: usize,
}

impl FrameBuilder {
    fn with(src_mac: MacAddr, network: Network) -> Self {
        Self {
            dst_mac: MacAddr([0x02, 0, 0, 0, 0, 0x01]),
            src_mac,
            vlan: None,
            network,
            frame_len: 64,
        }
    }

    pub fn ipv4(src_mac: MacAddr, src: Ipv4Addr) -> Self {
        Self::with(
            src_mac,
            Network::V4 {
                src,
                dst: Ipv4Addr::new(203, 0, 113, 254),
                ihl: 5,
            },
        )
    }

    pub fn ipv6(src_mac: MacAddr, src: Ipv6Addr) -> Self {
        Self::with(
            src_mac,
            Network::V6 {
                src,
                dst: "2001:db8:ffff::fe".parse().unwrap(),
            },
        )
    }

    pub fn ip(src_mac: MacAddr, src: IpAddr) -> Self {
        match src {
            IpAddr::V4(a) => Self::ipv4(src_mac, a),
            IpAddr::V6(a) => Self::ipv6(src_mac, a),
        }
    }

    pub fn arp(src_mac: MacAddr) -> Self {
        Self::with(
            src_mac,
            Network::Arp {
                sender_ip: Ipv4Addr::new(192, 0, 2, 200),
                target_ip: Ipv4Addr::new(192, 0, 2, 201),
            },
        )
    }

    pub fn raw(src_mac: MacAddr, ethertype: u16) -> Self {
        Self::with(src_mac, Network::Raw { ethertype })
    }

    pub fn dst_mac(mut self, mac: MacAddr) -> Self {
        self.dst_mac = mac;
        self
    }

    pub fn dst_ip(mut self, dst: IpAddr) -> Self {
        match (&mut self.network, dst) {
            (Network::V4 { dst: d, .. }, IpAddr::V4(a)) => *d = a,
            (Network::V6 { dst: d, .. }, IpAddr::V6(a)) => *d = a,
            _ => {}
        }
        self
    }

    pub fn vlan(mut self, id: u16) -> Self {
        self.vlan = Some(id);
        self
    }

    /// Sets the IPv4 header length field (in 32-bit words).
    pub fn ihl(mut self, words: u8) -> Self {
        if let Network::V4 { ihl, .. } = &mut self.network {
            *ihl = words;
        }
        self
    }

    /// Total on-the-wire length. Frames are padded with filler octets.
    pub fn frame_len(mut self, len: usize) -> Self {
        self.frame_len = len;
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frame_len.max(64));
        out.extend_from_slice(&self.dst_mac.0);
        out.extend_from_slice(&self.src_mac.0);
        if let Some(id) = self.vlan {
            out.extend_from_slice(&[0x81, 0x00]);
            out.extend_from_slice(&(id & 0x0fff).to_be_bytes());
        }
        match &self.network {
            Network::V4 { src, dst, ihl } => {
                out.extend_from_slice(&[0x08, 0x00]);
                let header_len = usize::from(*ihl).max(5) * 4;
                let total = (self.frame_len.saturating_sub(out.len())).max(header_len) as u16;
                let mut ip = vec![0u8; header_len];
                ip[0] = 0x40 | (*ihl & 0x0f);
                ip[2..4].copy_from_slice(&total.to_be_bytes());
                ip[8] = 64;
                ip[9] = 1;
                ip[12..16].copy_from_slice(&src.octets());
                ip[16..20].copy_from_slice(&dst.octets());
                for b in ip.iter_mut().skip(20) {
                    *b = 0x01;
                }
                out.extend_from_slice(&ip);
            }
            Network::V6 { src, dst } => {
                out.extend_from_slice(&[0x86, 0xdd]);
                let mut ip = [0u8; 40];
                ip[0] = 0x60;
                let payload = self.frame_len.saturating_sub(out.len() + 40) as u16;
                ip[4..6].copy_from_slice(&payload.to_be_bytes());
                ip[6] = 58;
                ip[7] = 64;
                ip[8..24].copy_from_slice(&src.octets());
                ip[24..40].copy_from_slice(&dst.octets());
                out.extend_from_slice(&ip);
            }
            Network::Arp {
                sender_ip,
                target_ip,
            } => {
                out.extend_from_slice(&[0x08, 0x06]);
                out.extend_from_slice(&[0x00, 0x01, 0x08, 0x00, 6, 4, 0x00, 0x01]);
                out.extend_from_slice(&self.src_mac.0);
                out.extend_from_slice(&sender_ip.octets());
                out.extend_from_slice(&[0u8; 6]);
                out.extend_from_slice(&target_ip.octets());
            }
            Network::Raw { ethertype } => {
                out.extend_from_slice(&ethertype.to_be_bytes());
            }
        }
        if out.len() < self.frame_len {
            out.resize(self.frame_len, FILLER);
        }
        out
    }

    pub fn build_truncated(&self, snap: usize) -> Vec<u8> {
        let mut out = self.build();
        out.truncate(snap);
        out
    }
}

/// Writes classic little-endian microsecond pcap files.
pub struct PcapWriter<W: Write> {
    out: W,
    big_endian: bool,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(out: W, snaplen: u32) -> io::Result<Self> {
        Self::with_endianness(out, snaplen, false)
    }

    pub fn with_endianness(mut out: W, snaplen: u32, big_endian: bool) -> io::Result<Self> {
        let fields: [u32; 4] = [0, 0, snaplen, 1];
        if big_endian {
            out.write_all(&0xa1b2c3d4u32.to_be_bytes())?;
            out.write_all(&2u16.to_be_bytes())?;
            out.write_all(&4u16.to_be_bytes())?;
            for f in fields {
                out.write_all(&f.to_be_bytes())?;
            }
        } else {
            out.write_all(&0xa1b2c3d4u32.to_le_bytes())?;
            out.write_all(&2u16.to_le_bytes())?;
            out.write_all(&4u16.to_le_bytes())?;
            for f in fields {
                out.write_all(&f.to_le_bytes())?;
            }
        }
        Ok(Self { out, big_endian })
    }

    pub fn write_record(&mut self, ts_ns: u64, orig_len: u32, data: &[u8]) -> io::Result<()> {
        let ts_sec = (ts_ns / 1_000_000_000) as u32;
        let ts_usec = ((ts_ns % 1_000_000_000) / 1_000) as u32;
        for f in [ts_sec, ts_usec, data.len() as u32, orig_len] {
            if self.big_endian {
                self.out.write_all(&f.to_be_bytes())?;
            } else {
                self.out.write_all(&f.to_le_bytes())?;
            }
        }
        self.out.write_all(data)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// One frame of a synthetic capture, stored untruncated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureFrame {
    pub ts_ns: u64,
    pub data: Vec<u8>,
}

/// A host contributing traffic to a synthetic capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Host {
    pub mac: MacAddr,
    pub ip: Option<IpAddr>,
}

impl Host {
    pub fn v4(index: u32) -> Self {
        let b = index.to_be_bytes();
        Host {
            mac: MacAddr([0x02, 0x10, b[0], b[1], b[2], b[3]]),
            ip: Some(IpAddr::V4(Ipv4Addr::from(
                0x0a00_0000 | (index.wrapping_add(1) & 0x00ff_ffff),
            ))),
        }
    }

    pub fn frame(&self, len: usize) -> FrameBuilder {
        match self.ip {
            Some(ip) => FrameBuilder::ip(self.mac, ip).frame_len(len),
            None => FrameBuilder::arp(self.mac).frame_len(len.max(42)),
        }
    }
}

/// Frames spread evenly over `duration_ns`, with each frame's sender chosen
/// by the caller-provided picker.
pub fn synthesize(
    count: usize,
    duration_ns: u64,
    frame_len: usize,
    mut pick: impl FnMut(usize) -> Host,
) -> Vec<FixtureFrame> {
    let step = if count > 1 {
        duration_ns / (count as u64 - 1).max(1)
    } else {
        0
    };
    (0..count)
        .map(|i| {
            let host = pick(i);
            FixtureFrame {
                ts_ns: step * i as u64,
                data: host.frame(frame_len).build(),
            }
        })
        .collect()
}

/// Random mix of `hosts` (uniformly chosen) with jittered timestamps.
pub fn random_traffic(
    seed: u64,
    hosts: &[Host],
    count: usize,
    duration_ns: u64,
) -> Vec<FixtureFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts: Vec<u64> = (0..count)
        .map(|_| rng.random_range(0..duration_ns.max(1)))
        .collect();
    ts.sort_unstable();
    ts.into_iter()
        .map(|t| {
            let host = hosts[rng.random_range(0..hosts.len())];
            let len = rng.random_range(60..=1514);
            FixtureFrame {
                ts_ns: t,
                data: host.frame(len).build(),
            }
        })
        .collect()
}

/// Writes frames as a pcap file, keeping at most `snap` octets of each.
pub fn write_pcap(path: &Path, frames: &[FixtureFrame], snap: u32) -> io::Result<()> {
    let file = io::BufWriter::new(std::fs::File::create(path)?);
    let mut w = PcapWriter::new(file, snap)?;
    for f in frames {
        let keep = f.data.len().min(snap as usize);
        w.write_record(f.ts_ns, f.data.len() as u32, &f.data[..keep])?;
    }
    w.into_inner().flush()
}

//! Brute-force reference implementations used to check the library.
//!
//! Nothing here calls the library's reader or dissector: the pcap file is
//! walked by hand and source fields are picked out at fixed byte offsets.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapid_core::testkit::{FixtureFrame, FrameBuilder};
use tapid_core::MacAddr;

/// (source MAC, source IP) as the oracle sees it. `None` means undecodable.
pub type OraclePair = Option<([u8; 6], Option<IpAddr>)>;

/// Every record of a little- or big-endian classic pcap, each cut to `snap`.
pub fn oracle_records(path: &Path, snap: usize) -> Vec<Vec<u8>> {
    let bytes = std::fs::read(path).expect("fixture readable");
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let le = match magic {
        [0xd4, 0xc3, 0xb2, 0xa1] => true,
        [0xa1, 0xb2, 0xc3, 0xd4] => false,
        other => panic!("oracle: unexpected magic {other:02x?}"),
    };
    let word = |at: usize| {
        let b = [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
        if le {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        }
    };
    let mut out = Vec::new();
    let mut at = 24;
    while at + 16 <= bytes.len() {
        let incl = word(at + 8) as usize;
        let body = &bytes[at + 16..at + 16 + incl];
        out.push(body[..incl.min(snap)].to_vec());
        at += 16 + incl;
    }
    out
}

pub fn oracle_pair(data: &[u8]) -> OraclePair {
    if data.len() < 14 {
        return None;
    }
    let mac: [u8; 6] = data[6..12].try_into().unwrap();
    let mut ethertype = (u16::from(data[12]) << 8) | u16::from(data[13]);
    let mut l3 = 14;
    if ethertype == 0x8100 {
        if data.len() < 18 {
            return None;
        }
        ethertype = (u16::from(data[16]) << 8) | u16::from(data[17]);
        l3 = 18;
    }
    if ethertype == 0x0800 {
        if data.len() < l3 + 20 {
            return None;
        }
        let a: [u8; 4] = data[l3 + 12..l3 + 16].try_into().unwrap();
        Some((mac, Some(IpAddr::V4(Ipv4Addr::from(a)))))
    } else if ethertype == 0x86dd {
        if data.len() < l3 + 40 {
            return None;
        }
        let a: [u8; 16] = data[l3 + 8..l3 + 24].try_into().unwrap();
        Some((mac, Some(IpAddr::V6(Ipv6Addr::from(a)))))
    } else {
        Some((mac, None))
    }
}

/// (matched, total) for frames whose source IP equals `known`.
pub fn oracle_tally(records: &[Vec<u8>], known: IpAddr) -> (u64, u64) {
    let matched = records
        .iter()
        .filter(|r| matches!(oracle_pair(r), Some((_, Some(ip))) if ip == known))
        .count();
    (matched as u64, records.len() as u64)
}

/// Unique decodable (MAC, IP) pairs.
pub fn oracle_pairs(records: &[Vec<u8>]) -> BTreeSet<([u8; 6], Option<IpAddr>)> {
    records.iter().filter_map(|r| oracle_pair(r)).collect()
}

/// One sender in a mixed fixture.
#[derive(Debug, Clone, Copy)]
pub enum Sender {
    V4(MacAddr, Ipv4Addr),
    V6(MacAddr, Ipv6Addr),
    Tagged(MacAddr, Ipv4Addr),
    Arp(MacAddr),
    Runt,
}

impl Sender {
    pub fn frame(&self, len: usize) -> Vec<u8> {
        match *self {
            Sender::V4(m, a) => FrameBuilder::ipv4(m, a).frame_len(len).build(),
            Sender::V6(m, a) => FrameBuilder::ipv6(m, a).frame_len(len).build(),
            Sender::Tagged(m, a) => FrameBuilder::ipv4(m, a).vlan(7).frame_len(len).build(),
            Sender::Arp(m) => FrameBuilder::arp(m).frame_len(len).build(),
            Sender::Runt => vec![0xee; len % 14],
        }
    }
}

/// A population of senders: mostly IPv4, plus IPv6, VLAN-tagged, ARP and
/// runt frames. Addresses are derived from `seed` so fixtures differ.
pub fn mixed_senders(seed: u64, count: usize) -> Vec<Sender> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e4d);
    (0..count)
        .map(|i| {
            let mut mac = [0x02u8, 0, 0, 0, 0, 0];
            rng.fill(&mut mac[1..]);
            let mac = MacAddr(mac);
            match i % 10 {
                0..=5 => Sender::V4(mac, Ipv4Addr::from(rng.random::<u32>())),
                6 => Sender::V6(mac, Ipv6Addr::from(rng.random::<u128>())),
                7 => Sender::Tagged(mac, Ipv4Addr::from(rng.random::<u32>())),
                8 => Sender::Arp(mac),
                _ => Sender::Runt,
            }
        })
        .collect()
}

/// `count` frames from randomly chosen senders over `duration_ns`.
pub fn mixed_traffic(
    seed: u64,
    senders: &[Sender],
    count: usize,
    duration_ns: u64,
) -> Vec<FixtureFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts: Vec<u64> = (0..count)
        .map(|_| rng.random_range(0..duration_ns.max(1)))
        .collect();
    ts.sort_unstable();
    ts.into_iter()
        .map(|ts_ns| {
            let s = senders[rng.random_range(0..senders.len())];
            FixtureFrame {
                ts_ns,
                data: s.frame(rng.random_range(60..=1514)),
            }
        })
        .collect()
}

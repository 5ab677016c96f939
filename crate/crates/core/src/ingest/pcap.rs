//! Classic libpcap file reader (and a minimal Ethernet/IPv4 writer used to
//! build fixtures).
//!
//! Supported link types: Ethernet (with 802.1Q tags), BSD loopback, raw IP,
//! Linux cooked capture. Only TCP and UDP over IPv4/IPv6 are kept; IPv6
//! extension headers and non-first IPv4 fragments are skipped.

use std::io::{Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use log::warn;

use super::flow::{Endpoint, Packet, Protocol};
use crate::error::{Error, Result};

const MAGIC_USEC: u32 = 0xa1b2_c3d4;
const MAGIC_NSEC: u32 = 0xa1b2_3c4d;

const LINKTYPE_NULL: u32 = 0;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_LINUX_SLL: u32 = 113;
const LINKTYPE_IPV4: u32 = 228;
const LINKTYPE_IPV6: u32 = 229;

const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Clone, Default)]
pub struct PcapCapture {
    pub link_type: u32,
    /// TCP/UDP packets, timestamps relative to the first record.
    pub packets: Vec<Packet>,
    /// Records that were truncated, malformed or not TCP/UDP over IP.
    pub skipped: usize,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

pub fn read_pcap(mut reader: impl Read) -> Result<PcapCapture> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    parse_pcap(&buf)
}

pub fn parse_pcap(buf: &[u8]) -> Result<PcapCapture> {
    if buf.len() < 24 {
        return Err(Error::Format("pcap global header truncated".into()));
    }
    let magic_le = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
    let (endian, nanos) = match magic_le {
        MAGIC_USEC => (Endian::Little, false),
        MAGIC_NSEC => (Endian::Little, true),
        m if m.swap_bytes() == MAGIC_USEC => (Endian::Big, false),
        m if m.swap_bytes() == MAGIC_NSEC => (Endian::Big, true),
        m => return Err(Error::Format(format!("bad pcap magic {m:#010x}"))),
    };
    let link_type = endian.u32(&buf[20..24]) & 0x0fff_ffff;
    let mut capture = PcapCapture {
        link_type,
        ..PcapCapture::default()
    };
    let mut offset = 24;
    let mut t0: Option<f64> = None;
    while offset < buf.len() {
        if buf.len() - offset < 16 {
            capture.skipped += 1;
            break;
        }
        let rec = &buf[offset..offset + 16];
        let secs = endian.u32(&rec[0..4]);
        let frac = endian.u32(&rec[4..8]);
        let incl = endian.u32(&rec[8..12]) as usize;
        offset += 16;
        if buf.len() - offset < incl {
            capture.skipped += 1;
            break;
        }
        let data = &buf[offset..offset + incl];
        offset += incl;
        let ts = f64::from(secs) + f64::from(frac) / if nanos { 1e9 } else { 1e6 };
        let start = *t0.get_or_insert(ts);
        match decode_frame(link_type, data) {
            Some(mut p) => {
                p.timestamp = (ts - start).max(0.0);
                capture.packets.push(p);
            }
            None => capture.skipped += 1,
        }
    }
    if capture.skipped > 0 {
        warn!("pcap: skipped {} record(s)", capture.skipped);
    }
    Ok(capture)
}

fn decode_frame(link_type: u32, data: &[u8]) -> Option<Packet> {
    match link_type {
        LINKTYPE_ETHERNET => {
            let mut off = 12;
            let mut ethertype = u16::from_be_bytes([*data.get(12)?, *data.get(13)?]);
            while ethertype == 0x8100 || ethertype == 0x88a8 {
                off += 4;
                ethertype = u16::from_be_bytes([*data.get(off)?, *data.get(off + 1)?]);
            }
            match ethertype {
                0x0800 | 0x86dd => decode_ip(data.get(off + 2..)?),
                _ => None,
            }
        }
        LINKTYPE_NULL => decode_ip(data.get(4..)?),
        LINKTYPE_LINUX_SLL => decode_ip(data.get(16..)?),
        LINKTYPE_RAW | LINKTYPE_IPV4 | LINKTYPE_IPV6 => decode_ip(data),
        _ => None,
    }
}

fn decode_ip(data: &[u8]) -> Option<Packet> {
    match data.first()? >> 4 {
        4 => {
            let ihl = usize::from(data[0] & 0x0f) * 4;
            if ihl < 20 || data.len() < ihl {
                return None;
            }
            let total = usize::from(u16::from_be_bytes([data[2], data[3]]));
            let frag = u16::from_be_bytes([data[6], data[7]]) & 0x1fff;
            if frag != 0 {
                return None;
            }
            let proto = data[9];
            let src = IpAddr::V4(Ipv4Addr::new(data[12], data[13], data[14], data[15]));
            let dst = IpAddr::V4(Ipv4Addr::new(data[16], data[17], data[18], data[19]));
            let end = total.clamp(ihl, data.len());
            decode_transport(proto, src, dst, &data[ihl..end])
        }
        6 => {
            if data.len() < 40 {
                return None;
            }
            let plen = usize::from(u16::from_be_bytes([data[4], data[5]]));
            let next = data[6];
            let mut s = [0u8; 16];
            let mut d = [0u8; 16];
            s.copy_from_slice(&data[8..24]);
            d.copy_from_slice(&data[24..40]);
            let end = (40 + plen).min(data.len());
            decode_transport(
                next,
                IpAddr::V6(Ipv6Addr::from(s)),
                IpAddr::V6(Ipv6Addr::from(d)),
                &data[40..end],
            )
        }
        _ => None,
    }
}

fn decode_transport(proto: u8, src_ip: IpAddr, dst_ip: IpAddr, seg: &[u8]) -> Option<Packet> {
    let port = |i: usize| u16::from_be_bytes([seg[i], seg[i + 1]]);
    match proto {
        IPPROTO_TCP => {
            if seg.len() < 20 {
                return None;
            }
            let hlen = usize::from(seg[12] >> 4) * 4;
            if hlen < 20 || seg.len() < hlen {
                return None;
            }
            Some(Packet {
                timestamp: 0.0,
                src: Endpoint::new(src_ip, port(0)),
                dst: Endpoint::new(dst_ip, port(2)),
                protocol: Protocol::Tcp,
                payload: seg[hlen..].to_vec(),
                tcp_window: port(14),
            })
        }
        IPPROTO_UDP => {
            if seg.len() < 8 {
                return None;
            }
            let ulen = usize::from(port(4)).clamp(8, seg.len());
            Some(Packet {
                timestamp: 0.0,
                src: Endpoint::new(src_ip, port(0)),
                dst: Endpoint::new(dst_ip, port(2)),
                protocol: Protocol::Udp,
                payload: seg[8..ulen].to_vec(),
                tcp_window: 0,
            })
        }
        _ => None,
    }
}

/// Writes IPv4 packets as a little-endian microsecond Ethernet capture.
/// IPv6 endpoints are rejected.
pub fn write_pcap(packets: &[Packet], mut out: impl Write) -> Result<()> {
    out.write_all(&MAGIC_USEC.to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&4u16.to_le_bytes())?;
    out.write_all(&0i32.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    out.write_all(&65535u32.to_le_bytes())?;
    out.write_all(&LINKTYPE_ETHERNET.to_le_bytes())?;
    for p in packets {
        let (IpAddr::V4(src), IpAddr::V4(dst)) = (p.src.ip, p.dst.ip) else {
            return Err(Error::Format("fixture writer supports IPv4 only".into()));
        };
        let mut l4 = Vec::new();
        l4.extend_from_slice(&p.src.port.to_be_bytes());
        l4.extend_from_slice(&p.dst.port.to_be_bytes());
        let proto = match p.protocol {
            Protocol::Tcp => {
                l4.extend_from_slice(&[0; 8]);
                l4.push(5 << 4);
                l4.push(0x18);
                l4.extend_from_slice(&p.tcp_window.to_be_bytes());
                l4.extend_from_slice(&[0; 4]);
                IPPROTO_TCP
            }
            Protocol::Udp => {
                l4.extend_from_slice(&((8 + p.payload.len()) as u16).to_be_bytes());
                l4.extend_from_slice(&[0; 2]);
                IPPROTO_UDP
            }
        };
        l4.extend_from_slice(&p.payload);
        let mut frame = vec![0u8; 12];
        frame.extend_from_slice(&0x0800u16.to_be_bytes());
        frame.extend_from_slice(&[0x45, 0]);
        frame.extend_from_slice(&((20 + l4.len()) as u16).to_be_bytes());
        frame.extend_from_slice(&[0, 0, 0x40, 0, 64, proto, 0, 0]);
        frame.extend_from_slice(&src.octets());
        frame.extend_from_slice(&dst.octets());
        frame.extend_from_slice(&l4);
        let secs = p.timestamp.floor();
        let usecs = ((p.timestamp - secs) * 1e6).round() as u32;
        out.write_all(&(secs as u32).to_le_bytes())?;
        out.write_all(&usecs.to_le_bytes())?;
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(&frame)?;
    }
    Ok(())
}

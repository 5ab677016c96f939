//! Newline-delimited flow-record text format.
//!
//! One flow per line, whitespace separated:
//!
//! ```text
//! <flow_id> <TCP|UDP> <fwd_ip> <fwd_port> <rev_ip> <rev_port> <pkt> <pkt> ...
//! ```
//!
//! where each `<pkt>` is `ts,dir,len,window[,payload_hex]`. `dir` is 0 for
//! packets sent by the forward endpoint and 1 otherwise. When the payload is
//! omitted the packet carries `len` zero bytes. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;
use std::io::BufRead;
use std::net::IpAddr;

use log::warn;

use super::flow::{Endpoint, Flow, FlowKey, Packet, Protocol};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub id: String,
    pub flow: Flow,
}

#[derive(Debug, Clone, Default)]
pub struct RecordSet {
    pub records: Vec<FlowRecord>,
    /// Lines that could not be parsed.
    pub skipped: usize,
}

pub fn read_flow_records(reader: impl BufRead) -> Result<RecordSet> {
    let mut set = RecordSet::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_line(trimmed) {
            Ok(r) => set.records.push(r),
            Err(msg) => {
                warn!("flow record line {}: {msg}", lineno + 1);
                set.skipped += 1;
            }
        }
    }
    Ok(set)
}

fn parse_line(line: &str) -> std::result::Result<FlowRecord, String> {
    let mut tok = line.split_whitespace();
    let mut next = |what: &str| tok.next().ok_or_else(|| format!("missing {what}"));
    let id = next("flow id")?.to_string();
    let protocol: Protocol = next("protocol")?.parse()?;
    let fwd = parse_endpoint(next("forward ip")?, next("forward port")?)?;
    let rev = parse_endpoint(next("reverse ip")?, next("reverse port")?)?;
    let mut packets = Vec::new();
    for pkt in tok {
        packets.push(parse_packet(pkt, protocol, fwd, rev)?);
    }
    if packets.is_empty() {
        return Err("flow has no packets".into());
    }
    Ok(FlowRecord {
        id,
        flow: Flow {
            key: FlowKey::new(fwd, rev, protocol),
            packets,
            forward_endpoint: fwd,
        },
    })
}

fn parse_endpoint(ip: &str, port: &str) -> std::result::Result<Endpoint, String> {
    let ip: IpAddr = ip.parse().map_err(|e| format!("bad ip {ip:?}: {e}"))?;
    let port: u16 = port.parse().map_err(|e| format!("bad port {port:?}: {e}"))?;
    Ok(Endpoint::new(ip, port))
}

fn parse_packet(
    s: &str,
    protocol: Protocol,
    fwd: Endpoint,
    rev: Endpoint,
) -> std::result::Result<Packet, String> {
    let fields: Vec<&str> = s.split(',').collect();
    if fields.len() != 4 && fields.len() != 5 {
        return Err(format!("packet {s:?} needs 4 or 5 fields"));
    }
    let timestamp: f64 = fields[0].parse().map_err(|_| format!("bad timestamp {:?}", fields[0]))?;
    if !(timestamp.is_finite() && timestamp >= 0.0) {
        return Err(format!("timestamp {timestamp} out of range"));
    }
    let (src, dst) = match fields[1] {
        "0" => (fwd, rev),
        "1" => (rev, fwd),
        d => return Err(format!("bad direction {d:?}")),
    };
    let len: usize = fields[2].parse().map_err(|_| format!("bad length {:?}", fields[2]))?;
    let tcp_window: u16 = fields[3].parse().map_err(|_| format!("bad window {:?}", fields[3]))?;
    let payload = match fields.get(4) {
        Some(hex) => {
            let bytes = decode_hex(hex)?;
            if bytes.len() != len {
                return Err(format!("length {len} disagrees with {} payload bytes", bytes.len()));
            }
            bytes
        }
        None => vec![0; len],
    };
    Ok(Packet {
        timestamp,
        src,
        dst,
        protocol,
        payload,
        tcp_window,
    })
}

fn decode_hex(s: &str) -> std::result::Result<Vec<u8>, String> {
    if !s.len().is_multiple_of(2) {
        return Err("odd-length payload hex".into());
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| format!("bad hex {:?}", &s[i..i + 2])))
        .collect()
}

/// Serializes one flow as a record line (without trailing newline).
/// Timestamps use the shortest representation that parses back exactly.
pub fn format_flow_record(id: &str, flow: &Flow) -> String {
    let fwd = flow.forward_endpoint;
    let rev = flow.reverse_endpoint();
    let mut line = format!("{id} {} {} {} {} {}", flow.key.protocol, fwd.ip, fwd.port, rev.ip, rev.port);
    for p in &flow.packets {
        let _ = write!(
            line,
            " {},{},{},{},",
            p.timestamp,
            flow.direction(p),
            p.payload.len(),
            p.tcp_window
        );
        for b in &p.payload {
            let _ = write!(line, "{b:02x}");
        }
    }
    line
}

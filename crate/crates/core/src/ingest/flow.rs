use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;

use log::warn;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TCP" => Ok(Protocol::Tcp),
            "UDP" => Ok(Protocol::Udp),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

/// One side of a conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: IpAddr, port: u16) -> Self {
        Endpoint { ip, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ip {
            IpAddr::V4(ip) => write!(f, "{ip}:{}", self.port),
            IpAddr::V6(ip) => write!(f, "[{ip}]:{}", self.port),
        }
    }
}

/// A transport-layer packet. `payload` holds the transport payload only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    /// Seconds since capture start.
    pub timestamp: f64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub protocol: Protocol,
    pub payload: Vec<u8>,
    /// Advertised TCP window; ignored for UDP.
    pub tcp_window: u16,
}

impl Packet {
    pub fn key(&self) -> FlowKey {
        FlowKey::new(self.src, self.dst, self.protocol)
    }

    fn is_well_formed(&self) -> bool {
        self.timestamp.is_finite() && self.timestamp >= 0.0
    }
}

/// Direction-independent five-tuple: the smaller endpoint comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub protocol: Protocol,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, protocol: Protocol) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey { lo, hi, protocol }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} <-> {}", self.protocol, self.lo, self.hi)
    }
}

/// All packets of one bidirectional five-tuple, in time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub key: FlowKey,
    pub packets: Vec<Packet>,
    /// Source of the first packet; packets from here have direction 0.
    pub forward_endpoint: Endpoint,
}

impl Flow {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// The endpoint opposite `forward_endpoint`.
    pub fn reverse_endpoint(&self) -> Endpoint {
        if self.key.lo == self.forward_endpoint {
            self.key.hi
        } else {
            self.key.lo
        }
    }

    /// Same packets, orientation taken from the other endpoint.
    pub fn with_reversed_orientation(&self) -> Flow {
        Flow {
            forward_endpoint: self.reverse_endpoint(),
            ..self.clone()
        }
    }

    /// 0 if the packet was sent by the forward endpoint, else 1.
    pub fn direction(&self, packet: &Packet) -> u8 {
        u8::from(packet.src != self.forward_endpoint)
    }
}

/// Result of grouping a capture into flows.
#[derive(Debug, Clone, Default)]
pub struct FlowAssembly {
    pub flows: Vec<Flow>,
    /// Packets dropped as malformed.
    pub skipped: usize,
}

/// Groups packets into bidirectional flows. Flows appear in first-seen
/// order; packets inside a flow are stably sorted by timestamp. Malformed
/// packets (negative or non-finite timestamps) are skipped and counted.
pub fn assemble_flows(packets: impl IntoIterator<Item = Packet>) -> FlowAssembly {
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<Vec<Packet>> = Vec::new();
    let mut keys: Vec<FlowKey> = Vec::new();
    let mut skipped = 0;
    for p in packets {
        if !p.is_well_formed() {
            skipped += 1;
            continue;
        }
        let key = p.key();
        let slot = *index.entry(key).or_insert_with(|| {
            flows.push(Vec::new());
            keys.push(key);
            flows.len() - 1
        });
        flows[slot].push(p);
    }
    if skipped > 0 {
        warn!("skipped {skipped} malformed packet(s) during flow assembly");
    }
    let flows = keys
        .into_iter()
        .zip(flows)
        .map(|(key, mut packets)| {
            packets.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap_or(Ordering::Equal));
            let forward_endpoint = packets[0].src;
            Flow {
                key,
                packets,
                forward_endpoint,
            }
        })
        .collect();
    FlowAssembly { flows, skipped }
}

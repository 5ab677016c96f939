//! Packet captures to flows to payload + header feature vectors.

pub mod features;
pub mod flow;
pub mod pcap;
pub mod record;

pub use features::{extract_features, ExtractionConfig, FeatureVector};
pub use flow::{assemble_flows, Endpoint, Flow, FlowAssembly, FlowKey, Packet, Protocol};
pub use pcap::{parse_pcap, read_pcap, write_pcap, PcapCapture};
pub use record::{format_flow_record, read_flow_records, FlowRecord, RecordSet};

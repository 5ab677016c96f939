use serde::{Deserialize, Serialize};

use super::flow::{Flow, Protocol};
use crate::error::{Error, Result};

/// Per-packet header columns.
pub const HDR_COLUMNS: usize = 4;
pub const COL_PAYLOAD_LEN: usize = 0;
pub const COL_TCP_WINDOW: usize = 1;
pub const COL_IAT: usize = 2;
pub const COL_DIRECTION: usize = 3;

/// Payload/header budgets and header normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Leading transport-payload bytes kept per flow.
    pub payload_bytes: usize,
    /// Leading packets whose header fields are kept.
    pub packets: usize,
    /// Divisors for payload length, TCP window, inter-arrival time and direction.
    pub hdr_scales: [f64; HDR_COLUMNS],
}

impl Default for ExtractionConfig {
    /// 784 payload bytes + 32 packets × 4 fields = 912 inputs.
    fn default() -> Self {
        ExtractionConfig {
            payload_bytes: 784,
            packets: 32,
            hdr_scales: [1500.0, 65535.0, 1.0, 1.0],
        }
    }
}

impl ExtractionConfig {
    pub fn input_dim(&self) -> usize {
        self.payload_bytes + HDR_COLUMNS * self.packets
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload_bytes == 0 || self.packets == 0 {
            return Err(Error::Config("payload and packet budgets must be positive".into()));
        }
        if self.hdr_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("header scales must be positive".into()));
        }
        Ok(())
    }
}

/// Bimodal flow representation: normalized payload bytes followed by a
/// `packets × 4` header matrix, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    payload_bytes: usize,
    flat: Vec<f64>,
}

impl FeatureVector {
    /// Wraps an already flattened vector.
    pub fn from_flat(payload_bytes: usize, flat: Vec<f64>) -> Result<Self> {
        if payload_bytes > flat.len() || !(flat.len() - payload_bytes).is_multiple_of(HDR_COLUMNS) {
            return Err(Error::Dimension {
                expected: payload_bytes,
                got: flat.len(),
                context: "feature vector layout",
            });
        }
        Ok(FeatureVector { payload_bytes, flat })
    }

    pub fn pay(&self) -> &[f64] {
        &self.flat[..self.payload_bytes]
    }

    pub fn hdr(&self) -> &[f64] {
        &self.flat[self.payload_bytes..]
    }

    pub fn hdr_row(&self, packet: usize) -> &[f64] {
        &self.hdr()[packet * HDR_COLUMNS..(packet + 1) * HDR_COLUMNS]
    }

    pub fn packet_rows(&self) -> usize {
        self.hdr().len() / HDR_COLUMNS
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bytes
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Builds the payload + header feature vector of one flow.
///
/// Payload bytes are concatenated across packets in flow order, scaled by
/// 1/255, truncated or zero-padded to the budget. Header row `p` holds the
/// payload length, TCP window (0 for UDP), inter-arrival time (0 for the
/// first packet, clamped to [0,1] after scaling) and direction.
pub fn extract_features(flow: &Flow, cfg: &ExtractionConfig) -> Result<FeatureVector> {
    if flow.packets.is_empty() {
        return Err(Error::EmptyFlow);
    }
    cfg.validate()?;
    let mut flat = vec![0.0; cfg.input_dim()];

    let (pay, hdr) = flat.split_at_mut(cfg.payload_bytes);
    let bytes = flow.packets.iter().flat_map(|p| p.payload.iter());
    for (slot, &b) in pay.iter_mut().zip(bytes) {
        *slot = f64::from(b) / 255.0;
    }

    let [s_len, s_win, s_iat, s_dir] = cfg.hdr_scales;
    let mut prev_ts = None;
    for (row, p) in hdr.chunks_exact_mut(HDR_COLUMNS).zip(&flow.packets) {
        let iat = prev_ts.map_or(0.0, |t: f64| (p.timestamp - t).max(0.0));
        prev_ts = Some(p.timestamp);
        let window = match p.protocol {
            Protocol::Tcp => f64::from(p.tcp_window),
            Protocol::Udp => 0.0,
        };
        row[COL_PAYLOAD_LEN] = p.payload.len() as f64 / s_len;
        row[COL_TCP_WINDOW] = window / s_win;
        row[COL_IAT] = (iat / s_iat).clamp(0.0, 1.0);
        row[COL_DIRECTION] = f64::from(flow.direction(p)) / s_dir;
    }
    Ok(FeatureVector {
        payload_bytes: cfg.payload_bytes,
        flat,
    })
}

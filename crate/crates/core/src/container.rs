//! Versioned binary container shared by model and feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! payload    f64 values, little-endian, in the order the header declares
//! ```
//!
//! The header carries a `tensors` array of `{name, shape}` entries; the
//! payload must contain exactly the values those shapes imply.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }
}

pub fn write_container(
    mut out: impl Write,
    magic: &[u8; 4],
    header: &Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut header = header.clone();
    let specs: Vec<TensorSpec> = tensors
        .iter()
        .map(|(n, t)| TensorSpec {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    match &mut header {
        Value::Object(map) => {
            map.insert("tensors".into(), serde_json::to_value(specs)?);
        }
        _ => return Err(Error::Format("container header must be a JSON object".into())),
    }
    let bytes = serde_json::to_vec(&header)?;
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(&bytes)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_container(mut input: impl Read, magic: &[u8; 4]) -> Result<Container> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_container(&bytes, magic)
}

pub fn parse_container(bytes: &[u8], magic: &[u8; 4]) -> Result<Container> {
    if bytes.len() < 16 {
        return Err(Error::Format("file truncated before header".into()));
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(Error::Format("file truncated inside header".into()));
    }
    let header: Value = serde_json::from_slice(&body[..header_len])?;
    let specs: Vec<TensorSpec> = serde_json::from_value(
        header
            .get("tensors")
            .cloned()
            .ok_or_else(|| Error::Format("header lacks tensor table".into()))?,
    )?;
    let payload = &body[header_len..];
    let expected: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        tensors.push((s.name, Tensor::from_vec(&s.shape, data)?));
    }
    Ok(Container { header, tensors })
}

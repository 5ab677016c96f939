//! Labelled feature files: the versioned container with magic `SNKF`, a
//! header holding ids, sources, tasks and labels, and one `[n, dim]` tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{parse_container, write_container};
use crate::dataset::{LabelMap, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::ingest::FeatureVector;
use crate::nn::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SNKF";

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    kind: String,
    payload_bytes: usize,
    dim: usize,
    task_ids: Vec<String>,
    label_maps: Vec<LabelMap>,
    ids: Vec<String>,
    sources: Vec<String>,
    labels: Vec<Vec<usize>>,
}

pub fn write_features(data: &LabeledDataset, out: impl Write) -> Result<()> {
    data.validate()?;
    let dim = data.feature_dim().unwrap_or(0);
    let payload_bytes = data.samples.first().map_or(0, |s| s.features.payload_bytes());
    let header = FeatureHeader {
        kind: "features".into(),
        payload_bytes,
        dim,
        task_ids: data.task_ids.clone(),
        label_maps: data.label_maps.clone(),
        ids: data.samples.iter().map(|s| s.id.clone()).collect(),
        sources: data.samples.iter().map(|s| s.source.clone()).collect(),
        labels: data.samples.iter().map(|s| s.labels.clone()).collect(),
    };
    let mut flat = Vec::with_capacity(data.len() * dim);
    for s in &data.samples {
        flat.extend_from_slice(s.features.flat());
    }
    let t = Tensor::from_vec(&[data.len(), dim], flat)?;
    write_container(out, FEATURE_MAGIC, &serde_json::to_value(header)?, &[("features".into(), &t)])
}

pub fn parse_features(bytes: &[u8]) -> Result<LabeledDataset> {
    let c = parse_container(bytes, FEATURE_MAGIC)?;
    let h: FeatureHeader = serde_json::from_value(c.header.clone())?;
    if h.kind != "features" {
        return Err(Error::Format(format!("feature file holds {:?}", h.kind)));
    }
    let t = c.tensor("features")?;
    let n = h.ids.len();
    if t.shape() != [n, h.dim] || h.sources.len() != n || h.labels.len() != n {
        return Err(Error::Format("feature file header and payload disagree".into()));
    }
    let samples = (0..n)
        .map(|i| {
            Ok(Sample {
                id: h.ids[i].clone(),
                source: h.sources[i].clone(),
                features: FeatureVector::from_flat(h.payload_bytes, t.data()[i * h.dim..(i + 1) * h.dim].to_vec())?,
                labels: h.labels[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(h.task_ids, h.label_maps, samples)
}

pub fn save_features(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(data, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GeneratorSpec, TaskSpec};

    #[test]
    fn round_trip() {
        let spec = GeneratorSpec {
            tasks: vec![TaskSpec {
                id: "t".into(),
                classes: vec!["a".into(), "b".into()],
            }],
            nesting: None,
            flows_per_class: 3,
            seed: 1,
            separation: 3.0,
            noise_sigma: 24.0,
            source: "s".into(),
            payload_bytes: 784,
            packets: 32,
        };
        let d = generate_dataset(&spec).unwrap().dataset;
        let mut buf = Vec::new();
        write_features(&d, &mut buf).unwrap();
        assert_eq!(parse_features(&buf).unwrap(), d);
        assert!(parse_features(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[3] = b'E';
        assert!(parse_features(&bad).is_err());
    }
}

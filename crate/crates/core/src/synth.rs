//! Deterministic synthetic traffic with controllable class separation.
//!
//! Every non-derived task owns a contiguous block of payload positions. A
//! class's byte mean at each owned position sits `separation · σ / 2` above
//! or below mid-range (sign drawn per class and position), so two classes
//! that disagree on a position are `separation · σ` apart there. Header
//! statistics (packet sizes, timing, direction, window) follow the class of
//! the first non-derived task. A derived task (the coarse side of a
//! refinement) takes its label from the nesting map and owns no bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::{IpAddr, Ipv4Addr};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMap, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::ingest::{extract_features, format_flow_record, Endpoint, ExtractionConfig, Flow, FlowKey, Packet, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingSpec {
    pub coarse_task: String,
    pub fine_task: String,
    /// Coarse class name of each fine class, in fine-class order.
    pub parent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub nesting: Option<NestingSpec>,
    /// Flows per class of the driving task (the fine task when nested,
    /// otherwise the first task).
    pub flows_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Byte-level noise σ.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Source-domain tag written into every sample.
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default = "default_payload_bytes")]
    pub payload_bytes: usize,
    #[serde(default = "default_packets")]
    pub packets: usize,
}

fn default_separation() -> f64 {
    3.0
}
fn default_noise() -> f64 {
    24.0
}
fn default_source() -> String {
    "synthetic".into()
}
fn default_payload_bytes() -> usize {
    784
}
fn default_packets() -> usize {
    32
}

/// Per-class generative parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    /// Byte means at the owning task's payload positions.
    pub payload_mean: Vec<f64>,
    pub payload_sigma: f64,
    /// Payload-length mean per packet position.
    pub packet_len_mean: Vec<f64>,
    pub packet_len_sigma: f64,
    /// Log-normal inter-arrival parameters (seconds).
    pub iat_log_mu: f64,
    pub iat_log_sigma: f64,
    /// Probability that the packet at each position travels forward.
    pub forward_prob: Vec<f64>,
    /// Inclusive packet-count range.
    pub flow_len: (usize, usize),
    pub protocol: Protocol,
    pub tcp_window: u16,
}

impl ClassProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.payload_sigma >= 0.0
            && self.packet_len_sigma >= 0.0
            && self.iat_log_sigma >= 0.0
            && self.forward_prob.iter().all(|p| (0.0..=1.0).contains(p))
            && self.flow_len.0 >= 1
            && self.flow_len.0 <= self.flow_len.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("class profile {:?} is invalid", self.name)))
        }
    }
}

/// Generated samples together with the flows they were extracted from.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: LabeledDataset,
    pub flows: Vec<Flow>,
}

impl GeneratedData {
    pub fn write_flow_records(&self, mut out: impl Write) -> Result<()> {
        for (s, f) in self.dataset.samples.iter().zip(&self.flows) {
            writeln!(out, "{}", format_flow_record(&s.id, f))?;
        }
        Ok(())
    }

    pub fn write_labels_csv(&self, out: impl Write) -> Result<()> {
        write_labels_csv(&self.dataset, out)
    }
}

/// `flow_id,task_id,label` rows, one per sample and task.
pub fn write_labels_csv(data: &LabeledDataset, mut out: impl Write) -> Result<()> {
    writeln!(out, "flow_id,task_id,label")?;
    for s in &data.samples {
        for (t, &l) in s.labels.iter().enumerate() {
            let name = data.label_maps[t].name(l).unwrap_or("?");
            writeln!(out, "{},{},{}", s.id, data.task_ids[t], name)?;
        }
    }
    Ok(())
}

/// Parsed labels CSV: per flow id, `(task, class)` pairs in file order.
#[derive(Debug, Clone, Default)]
pub struct LabelTable {
    pub task_ids: Vec<String>,
    /// Class names per task in first-seen order.
    pub classes: Vec<Vec<String>>,
    pub rows: BTreeMap<String, Vec<(usize, usize)>>,
}

pub fn read_labels_csv(reader: impl BufRead) -> Result<LabelTable> {
    let mut table = LabelTable::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "flow_id,task_id,label") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let [flow, task, label] = parts[..] else {
            return Err(Error::Dataset(format!("labels line {}: expected 3 fields", n + 1)));
        };
        let t = match table.task_ids.iter().position(|x| x == task) {
            Some(t) => t,
            None => {
                table.task_ids.push(task.to_string());
                table.classes.push(Vec::new());
                table.task_ids.len() - 1
            }
        };
        let c = match table.classes[t].iter().position(|x| x == label) {
            Some(c) => c,
            None => {
                table.classes[t].push(label.to_string());
                table.classes[t].len() - 1
            }
        };
        let row = table.rows.entry(flow.to_string()).or_default();
        if row.iter().any(|(rt, _)| *rt == t) {
            return Err(Error::Dataset(format!("flow {flow:?} labelled twice for task {task:?}")));
        }
        row.push((t, c));
    }
    Ok(table)
}

impl LabelTable {
    /// Labels for one flow in task order, or `None` if any task is missing.
    pub fn labels_for(&self, flow_id: &str) -> Option<Vec<usize>> {
        let row = self.rows.get(flow_id)?;
        let mut out = vec![usize::MAX; self.task_ids.len()];
        for &(t, c) in row {
            out[t] = c;
        }
        out.iter().all(|&c| c != usize::MAX).then_some(out)
    }

    pub fn label_maps(&self) -> Result<Vec<LabelMap>> {
        self.classes.iter().map(|c| LabelMap::new(c.clone())).collect()
    }
}

struct Layout {
    label_maps: Vec<LabelMap>,
    /// Index of the driving task.
    driver: usize,
    /// `(coarse, fine, parent)` for a refinement.
    derived: Option<(usize, usize, Vec<usize>)>,
    /// Payload block per task; empty for a derived task.
    blocks: Vec<std::ops::Range<usize>>,
    /// First non-derived task, whose class drives header statistics.
    header_task: usize,
}

fn layout(spec: &GeneratorSpec) -> Result<Layout> {
    if spec.tasks.is_empty() {
        return Err(Error::Config("generator needs at least one task".into()));
    }
    if spec.flows_per_class == 0 {
        return Err(Error::Config("flows_per_class must be positive".into()));
    }
    if spec.separation.is_nan() || spec.separation <= 0.0 || spec.noise_sigma.is_nan() || spec.noise_sigma < 0.0 {
        return Err(Error::Config("separation must be positive and noise non-negative".into()));
    }
    ExtractionConfig {
        payload_bytes: spec.payload_bytes,
        packets: spec.packets,
        ..ExtractionConfig::default()
    }
    .validate()?;
    let label_maps = spec
        .tasks
        .iter()
        .map(|t| {
            if t.classes.len() < 2 {
                return Err(Error::Config(format!("task {:?} needs at least two classes", t.id)));
            }
            LabelMap::new(t.classes.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let index = |id: &str| {
        spec.tasks
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("nesting names unknown task {id:?}")))
    };
    let mut ids: Vec<&str> = spec.tasks.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("task ids must be unique".into()));
    }
    let derived = match &spec.nesting {
        None => None,
        Some(n) => {
            let (c, f) = (index(&n.coarse_task)?, index(&n.fine_task)?);
            if c == f {
                return Err(Error::Config("coarse and fine task must differ".into()));
            }
            if n.parent.len() != label_maps[f].len() {
                return Err(Error::Config(format!(
                    "nesting lists {} parents for {} fine classes",
                    n.parent.len(),
                    label_maps[f].len()
                )));
            }
            let parent = n
                .parent
                .iter()
                .map(|p| {
                    label_maps[c]
                        .index(p)
                        .ok_or_else(|| Error::Config(format!("nesting parent {p:?} is not a coarse class")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(orphan) = (0..label_maps[c].len()).find(|k| !parent.contains(k)) {
                return Err(Error::Config(format!(
                    "coarse class {:?} has no fine classes",
                    label_maps[c].name(orphan).unwrap_or("?")
                )));
            }
            Some((c, f, parent))
        }
    };
    let driver = derived.as_ref().map_or(0, |d| d.1);
    let owners: Vec<usize> = (0..spec.tasks.len())
        .filter(|&t| derived.as_ref().is_none_or(|d| d.0 != t))
        .collect();
    let mut blocks = vec![0..0; spec.tasks.len()];
    let per = spec.payload_bytes / owners.len();
    if per == 0 {
        return Err(Error::Config("payload budget smaller than the number of tasks".into()));
    }
    for (i, &t) in owners.iter().enumerate() {
        let end = if i + 1 == owners.len() { spec.payload_bytes } else { (i + 1) * per };
        blocks[t] = i * per..end;
    }
    Ok(Layout {
        label_maps,
        driver,
        derived,
        blocks,
        header_task: owners[0],
    })
}

fn make_profile(name: &str, block_len: usize, packets: usize, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> ClassProfile {
    let half = spec.separation * spec.noise_sigma / 2.0;
    let payload_mean = (0..block_len)
        .map(|_| if rng.gen::<bool>() { 127.5 + half } else { 127.5 - half })
        .collect();
    let base_len = rng.gen_range(80.0..600.0);
    let packet_len_mean = (0..packets).map(|_| base_len * rng.gen_range(0.7..1.3)).collect();
    let forward_prob = (0..packets)
        .map(|p| if p == 0 { 1.0 } else { rng.gen_range(0.1..0.9) })
        .collect();
    let min_len = rng.gen_range(12..=20);
    ClassProfile {
        name: name.to_string(),
        payload_mean,
        payload_sigma: spec.noise_sigma,
        packet_len_mean,
        packet_len_sigma: 0.1 * base_len,
        iat_log_mu: rng.gen_range((0.001f64).ln()..(0.2f64).ln()),
        iat_log_sigma: 0.5,
        forward_prob,
        flow_len: (min_len, min_len + 12),
        protocol: if rng.gen_bool(0.2) { Protocol::Udp } else { Protocol::Tcp },
        tcp_window: rng.gen_range(1024..=65535),
    }
}

/// Class profiles per task, deterministic in the spec seed.
pub fn build_profiles(spec: &GeneratorSpec) -> Result<Vec<Vec<ClassProfile>>> {
    let lay = layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for (t, task) in spec.tasks.iter().enumerate() {
        out.push(
            task.classes
                .iter()
                .map(|c| make_profile(c, lay.blocks[t].len(), spec.packets, spec, &mut rng))
                .collect(),
        );
    }
    Ok(out)
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % classes).collect();
    v.shuffle(rng);
    v
}

fn synth_flow(
    profiles: &[&ClassProfile],
    blocks: &[std::ops::Range<usize>],
    header: &ClassProfile,
    payload_bytes: usize,
    flow_no: usize,
    rng: &mut ChaCha8Rng,
) -> Flow {
    let n_packets = rng.gen_range(header.flow_len.0..=header.flow_len.1);
    // Byte stream: class-driven for the feature window, uniform beyond it.
    let mut stream = Vec::with_capacity(payload_bytes);
    for (prof, block) in profiles.iter().zip(blocks) {
        for mean in &prof.payload_mean[..block.len()] {
            let noise = Normal::new(0.0, prof.payload_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
            stream.push((mean + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
        }
    }
    let client = Endpoint::new(
        IpAddr::V4(Ipv4Addr::new(10, (flow_no >> 16) as u8, (flow_no >> 8) as u8, flow_no as u8)),
        rng.gen_range(1024..=65535),
    );
    let server = Endpoint::new(IpAddr::V4(Ipv4Addr::new(192, 168, rng.gen(), rng.gen_range(1..=254))), 443);
    let iat = LogNormal::new(header.iat_log_mu, header.iat_log_sigma).expect("valid log-normal");
    let mut t = 0.0f64;
    let mut cursor = 0usize;
    let mut packets = Vec::with_capacity(n_packets);
    for p in 0..n_packets {
        if p > 0 {
            t += iat.sample(rng);
        }
        let pos = p.min(header.packet_len_mean.len() - 1);
        let len_dist = Normal::new(header.packet_len_mean[pos], header.packet_len_sigma.max(f64::MIN_POSITIVE))
            .expect("valid sigma");
        let len = len_dist.sample(rng).round().clamp(1.0, 1460.0) as usize;
        let mut payload = Vec::with_capacity(len);
        for _ in 0..len {
            payload.push(if cursor < stream.len() { stream[cursor] } else { rng.gen() });
            cursor += 1;
        }
        let forward = p == 0 || rng.gen_bool(header.forward_prob[pos]);
        let (src, dst) = if forward { (client, server) } else { (server, client) };
        packets.push(Packet {
            timestamp: t,
            src,
            dst,
            protocol: header.protocol,
            payload,
            tcp_window: match header.protocol {
                Protocol::Tcp => header.tcp_window.saturating_sub(rng.gen_range(0..512)),
                Protocol::Udp => 0,
            },
        });
    }
    Flow {
        key: FlowKey::new(client, server, header.protocol),
        packets,
        forward_endpoint: client,
    }
}

pub fn generate_dataset(spec: &GeneratorSpec) -> Result<GeneratedData> {
    let lay = layout(spec)?;
    let profiles = build_profiles(spec)?;
    for p in profiles.iter().flatten() {
        p.validate()?;
    }
    let cfg = ExtractionConfig {
        payload_bytes: spec.payload_bytes,
        packets: spec.packets,
        ..ExtractionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let n_driver = lay.label_maps[lay.driver].len();
    let n = spec.flows_per_class * n_driver;
    let k = spec.tasks.len();
    let mut labels = vec![vec![0usize; k]; n];
    for t in 0..k {
        if lay.derived.as_ref().is_some_and(|d| d.0 == t) {
            continue;
        }
        let col = if t == lay.driver {
            (0..n).map(|i| i / spec.flows_per_class).collect()
        } else {
            balanced_labels(n, lay.label_maps[t].len(), &mut rng)
        };
        for (row, l) in labels.iter_mut().zip(col) {
            row[t] = l;
        }
    }
    if let Some((c, f, parent)) = &lay.derived {
        for row in &mut labels {
            row[*c] = parent[row[*f]];
        }
    }

    let owners: Vec<usize> = (0..k).filter(|&t| !lay.blocks[t].is_empty()).collect();
    let mut samples = Vec::with_capacity(n);
    let mut flows = Vec::with_capacity(n);
    for (i, row) in labels.into_iter().enumerate() {
        let profs: Vec<&ClassProfile> = owners.iter().map(|&t| &profiles[t][row[t]]).collect();
        let blocks: Vec<_> = owners.iter().map(|&t| lay.blocks[t].clone()).collect();
        let header = &profiles[lay.header_task][row[lay.header_task]];
        let flow = synth_flow(&profs, &blocks, header, spec.payload_bytes, i, &mut rng);
        let features = extract_features(&flow, &cfg)?;
        samples.push(Sample {
            id: format!("{}-{i:05}", spec.source),
            source: spec.source.clone(),
            features,
            labels: row,
        });
        flows.push(flow);
    }
    let dataset = LabeledDataset::new(
        spec.tasks.iter().map(|t| t.id.clone()).collect(),
        lay.label_maps,
        samples,
    )?;
    Ok(GeneratedData { dataset, flows })
}

/// Accuracy of a nearest-centroid classifier fitted and scored on `data`.
pub fn nearest_centroid_accuracy(data: &LabeledDataset, task: usize) -> f64 {
    let classes = data.label_maps[task].len();
    let dim = data.feature_dim().unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in &data.samples {
        let c = s.labels[task];
        counts[c] += 1;
        sums[c].iter_mut().zip(s.features.flat()).for_each(|(a, b)| *a += b);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = data
        .samples
        .iter()
        .filter(|s| {
            let x = s.features.flat();
            let best = (0..classes)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = sums[a].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = sums[b].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            best == s.labels[task]
        })
        .count();
    correct as f64 / data.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::read_flow_records;

    fn spec() -> GeneratorSpec {
        GeneratorSpec {
            tasks: vec![
                TaskSpec {
                    id: "coarse".into(),
                    classes: vec!["benign".into(), "malicious".into()],
                },
                TaskSpec {
                    id: "fine".into(),
                    classes: (0..4).map(|i| format!("f{i}")).collect(),
                },
            ],
            nesting: Some(NestingSpec {
                coarse_task: "coarse".into(),
                fine_task: "fine".into(),
                parent: vec!["benign".into(), "malicious".into(), "malicious".into(), "benign".into()],
            }),
            flows_per_class: 5,
            seed: 3,
            separation: 3.0,
            noise_sigma: 24.0,
            source: "dom".into(),
            payload_bytes: 784,
            packets: 32,
        }
    }

    #[test]
    fn nesting_labels_consistent() {
        let g = generate_dataset(&spec()).unwrap();
        assert_eq!(g.dataset.len(), 20);
        let parent = [0, 1, 1, 0];
        assert!(g.dataset.samples.iter().all(|s| s.labels[0] == parent[s.labels[1]]));
        assert_eq!(g.dataset.class_counts(1), vec![5; 4]);
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&spec()).unwrap();
        let b = generate_dataset(&spec()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let mut other = spec();
        other.seed = 4;
        assert_ne!(generate_dataset(&other).unwrap().dataset, a.dataset);
    }

    #[test]
    fn bad_nesting_rejected() {
        let mut s = spec();
        s.nesting.as_mut().unwrap().parent[0] = "unknown".into();
        assert!(generate_dataset(&s).is_err());
        let mut s = spec();
        s.nesting.as_mut().unwrap().parent = vec!["benign".into(); 4];
        assert!(generate_dataset(&s).is_err());
        let mut s = spec();
        s.nesting.as_mut().unwrap().parent.pop();
        assert!(generate_dataset(&s).is_err());
    }

    #[test]
    fn records_round_trip_exactly() {
        let g = generate_dataset(&spec()).unwrap();
        let mut buf = Vec::new();
        g.write_flow_records(&mut buf).unwrap();
        let set = read_flow_records(&buf[..]).unwrap();
        assert_eq!(set.skipped, 0);
        for (r, s) in set.records.iter().zip(&g.dataset.samples) {
            assert_eq!(r.id, s.id);
            let f = extract_features(&r.flow, &ExtractionConfig::default()).unwrap();
            assert!(f.flat().iter().zip(s.features.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn labels_csv_round_trip() {
        let g = generate_dataset(&spec()).unwrap();
        let mut buf = Vec::new();
        g.write_labels_csv(&mut buf).unwrap();
        let table = read_labels_csv(&buf[..]).unwrap();
        assert_eq!(table.task_ids, vec!["coarse", "fine"]);
        for s in &g.dataset.samples {
            let l = table.labels_for(&s.id).unwrap();
            for (t, &c) in l.iter().enumerate() {
                assert_eq!(table.classes[t][c], g.dataset.label_maps[t].name(s.labels[t]).unwrap());
            }
        }
    }

    #[test]
    fn separable_by_centroids() {
        let s = GeneratorSpec {
            tasks: vec![TaskSpec {
                id: "t".into(),
                classes: vec!["a".into(), "b".into(), "c".into()],
            }],
            nesting: None,
            flows_per_class: 30,
            ..spec()
        };
        let g = generate_dataset(&s).unwrap();
        assert!(nearest_centroid_accuracy(&g.dataset, 0) >= 0.99);
    }
}

//! Per-task expert sub-models: a transformer encoder whose 912-dim output is
//! the representation shared into fusion, plus a private `[912, 256, N]`
//! classification head that fusion never reads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{parse_container, write_container};
use crate::dataset::{LabelMap, LabeledDataset};
use crate::error::{check_len, Error, Result};
use crate::ingest::FeatureVector;
use crate::nn::encoder::{encoder_backward, encoder_forward_traced, init_encoder};
use crate::nn::init::{epoch_order, param_rng};
use crate::nn::mlp::{init_mlp, mlp_backward_ce, mlp_dims, mlp_forward};
use crate::nn::{
    adam_step, argmax, cross_entropy, AdamState, DropoutStream, EncoderConfig, Gradients, ParamSet,
    TrainConfig,
};
use crate::trace::EpochRecord;

pub const MODEL_MAGIC: &[u8; 4] = b"SNKE";
pub const HEAD_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub id: String,
    pub task_id: String,
    pub encoder_cfg: EncoderConfig,
    pub encoder: ParamSet,
    pub head: ParamSet,
    pub label_map: LabelMap,
    /// Head dropout rate used in train mode.
    pub head_dropout: f64,
    /// Set once the expert is locked inside a fused model.
    pub frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExpertHeader {
    kind: String,
    id: String,
    task_id: String,
    encoder: EncoderConfig,
    head_hidden: usize,
    head_dropout: f64,
    input_dim: usize,
    n_target: usize,
    label_map: Vec<String>,
    frozen: bool,
}

impl ExpertModel {
    /// Untrained expert with fresh parameters.
    pub fn init(
        id: &str,
        task_id: &str,
        label_map: LabelMap,
        encoder_cfg: EncoderConfig,
        head_dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if label_map.len() < 2 {
            return Err(Error::DegenerateTask(format!(
                "task {task_id:?} has {} class(es)",
                label_map.len()
            )));
        }
        let mut rng = param_rng(seed);
        let encoder = init_encoder(&encoder_cfg, &mut rng)?;
        let head = init_mlp(encoder_cfg.input_dim(), HEAD_HIDDEN, label_map.len(), &mut rng)?;
        Ok(ExpertModel {
            id: id.to_string(),
            task_id: task_id.to_string(),
            encoder_cfg,
            encoder,
            head,
            label_map,
            head_dropout,
            frozen: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_cfg.input_dim()
    }

    pub fn n_target(&self) -> usize {
        self.label_map.len()
    }

    /// Encoder output in eval mode.
    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len(), "expert input")?;
        Ok(encoder_forward_traced(&self.encoder_cfg, &self.encoder, x, false, DropoutStream::new(0))?
            .output()
            .to_vec())
    }

    /// Class probabilities in eval mode.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_with_hidden(x)?.1)
    }

    /// `(representation, probabilities)` from one eval-mode pass.
    pub fn predict_with_hidden(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rep = self.representation(x)?;
        let tr = mlp_forward(&self.head, &rep, false, 0.0, DropoutStream::new(0))?;
        Ok((rep, tr.probabilities().to_vec()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let header = serde_json::to_value(self.header())?;
        let tensors = self.named_tensors("");
        let refs: Vec<(String, &crate::nn::Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), *t)).collect();
        write_container(out, MODEL_MAGIC, &header, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = parse_container(bytes, MODEL_MAGIC)?;
        if c.header.get("kind").and_then(|k| k.as_str()) != Some("expert") {
            return Err(Error::Format("model file does not hold an expert".into()));
        }
        Self::from_header_and_tensors(&c.header, "", |name| c.tensor(name).cloned())
    }

    fn header(&self) -> ExpertHeader {
        ExpertHeader {
            kind: "expert".into(),
            id: self.id.clone(),
            task_id: self.task_id.clone(),
            encoder: self.encoder_cfg,
            head_hidden: HEAD_HIDDEN,
            head_dropout: self.head_dropout,
            input_dim: self.input_dim(),
            n_target: self.n_target(),
            label_map: self.label_map.names().to_vec(),
            frozen: self.frozen,
        }
    }

    /// Header JSON used when the expert is embedded in another container.
    pub(crate) fn header_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.header())?)
    }

    pub(crate) fn named_tensors(&self, prefix: &str) -> Vec<(String, &crate::nn::Tensor)> {
        let enc = self.encoder.iter().map(|(n, t)| (format!("{prefix}encoder.{n}"), t));
        let head = self.head.iter().map(|(n, t)| (format!("{prefix}head.{n}"), t));
        enc.chain(head).collect()
    }

    pub(crate) fn from_header_and_tensors(
        header: &serde_json::Value,
        prefix: &str,
        tensor: impl Fn(&str) -> Result<crate::nn::Tensor>,
    ) -> Result<Self> {
        let h: ExpertHeader = serde_json::from_value(header.clone())?;
        h.encoder.validate()?;
        let label_map = LabelMap::new(h.label_map)?;
        let mut model = ExpertModel::init(&h.id, &h.task_id, label_map, h.encoder, h.head_dropout, 0)?;
        for (part, set) in [("encoder", &mut model.encoder), ("head", &mut model.head)] {
            let mut loaded = ParamSet::new();
            for (name, _) in set.iter() {
                loaded.push(name, tensor(&format!("{prefix}{part}.{name}"))?)?;
            }
            if !loaded.same_layout(set) {
                return Err(Error::Format(format!("{part} tensor shapes do not match header")));
            }
            *set = loaded;
        }
        let (_, hidden, out) = mlp_dims(&model.head)?;
        if hidden != h.head_hidden || out != h.n_target || model.input_dim() != h.input_dim {
            return Err(Error::Format("expert header dimensions are inconsistent".into()));
        }
        model.frozen = h.frozen;
        Ok(model)
    }
}

/// 912-dim representation consumed by gates.
pub fn expert_representation(model: &ExpertModel, x: &FeatureVector) -> Result<Vec<f64>> {
    model.representation(x.flat())
}

pub fn expert_predict(model: &ExpertModel, x: &FeatureVector) -> Result<Vec<f64>> {
    model.predict(x.flat())
}

pub fn save_expert(model: &ExpertModel, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_expert(path: impl AsRef<Path>) -> Result<ExpertModel> {
    ExpertModel::load(path)
}

#[derive(Debug, Clone)]
pub struct TrainedExpert {
    pub model: ExpertModel,
    pub epochs: Vec<EpochRecord>,
}

/// Mean cross-entropy and accuracy of an expert on a single-task dataset.
pub fn expert_loss_and_accuracy(model: &ExpertModel, data: &LabeledDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in &data.samples {
        let p = model.predict(s.features.flat())?;
        loss += cross_entropy(&p, s.labels[0])?;
        correct += usize::from(argmax(&p) == s.labels[0]);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains encoder and head jointly with cross-entropy and Adam.
///
/// `train` and `validation` must be single-task datasets over the same
/// label map. Every class of the map needs at least one training sample.
pub fn train_expert(
    id: &str,
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainedExpert> {
    cfg.validate()?;
    train.validate()?;
    if train.task_ids.len() != 1 {
        return Err(Error::Dataset(format!(
            "expert training needs a single-task dataset, got {} tasks",
            train.task_ids.len()
        )));
    }
    let label_map = train.label_maps[0].clone();
    let counts = train.class_counts(0);
    if counts.len() < 2 {
        return Err(Error::DegenerateTask(format!("task {:?} has fewer than two classes", train.task_ids[0])));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateTask(format!(
            "class {:?} has no training samples",
            label_map.name(c).unwrap_or("?")
        )));
    }
    if let Some(v) = validation {
        if v.label_maps.first() != Some(&label_map) {
            return Err(Error::Dataset("validation label map differs from training".into()));
        }
    }
    let encoder_cfg = EncoderConfig {
        dropout: cfg.dropout_rate,
        ..EncoderConfig::default()
    };
    let mut model = ExpertModel::init(id, &train.task_ids[0], label_map, encoder_cfg, cfg.dropout_rate, cfg.seed)?;
    check_len(model.input_dim(), train.feature_dim().unwrap_or(0), "expert training features")?;

    let mut enc_state = AdamState::new(&model.encoder);
    let mut head_state = AdamState::new(&model.head);
    let mut enc_grads = Gradients::for_params(&model.encoder, true);
    let mut head_grads = Gradients::for_params(&model.head, true);
    let base_stream = DropoutStream::new(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            enc_grads.zero();
            head_grads.zero();
            let step_stream = base_stream.fork(step);
            for (k, &i) in batch.iter().enumerate() {
                let s = &train.samples[i];
                let stream = step_stream.fork(k as u64);
                let enc_tr = encoder_forward_traced(&model.encoder_cfg, &model.encoder, s.features.flat(), true, stream)?;
                let head_tr = mlp_forward(&model.head, enc_tr.output(), true, model.head_dropout, stream.fork(u64::MAX))?;
                epoch_loss += cross_entropy(head_tr.probabilities(), s.labels[0])?;
                let d_rep = mlp_backward_ce(&model.head, &head_tr, s.labels[0], 1.0, &mut head_grads, true)?;
                encoder_backward(&model.encoder, &enc_tr, &d_rep, &mut enc_grads)?;
            }
            let inv = 1.0 / batch.len() as f64;
            enc_grads.scale(inv);
            head_grads.scale(inv);
            adam_step(&mut model.encoder, &enc_grads, &mut enc_state, cfg.learning_rate)?;
            adam_step(&mut model.head, &head_grads, &mut head_state, cfg.learning_rate)?;
            step += 1;
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diagnostic(format!("non-finite training loss at epoch {}", epoch + 1)));
        }
        let (val_loss, val_acc) = match validation {
            Some(v) if !v.is_empty() => {
                let (l, a) = expert_loss_and_accuracy(&model, v)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        log::debug!("expert {id} epoch {} train_loss {train_loss:.5} val_acc {val_acc:?}", epoch + 1);
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_acc,
        });
    }
    Ok(TrainedExpert {
        model,
        epochs: records,
    })
}

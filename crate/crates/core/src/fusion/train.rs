//! Fine-tuning of fused models: `L_total = Σ_k α_k L_k` over every task,
//! with experts frozen unless explicitly released.

use std::io::Write;

use super::{mix, tower_forward, FusedModel};
use crate::dataset::{LabelMap, LabeledDataset};
use crate::error::{check_len, Error, Result};
use crate::nn::encoder::{encoder_backward, encoder_forward_traced, EncoderTrace};
use crate::nn::init::epoch_order;
use crate::nn::mlp::mlp_backward_ce;
use crate::nn::{adam_step, argmax, cross_entropy, AdamState, DropoutStream, Gradients, TrainConfig};

/// Gradients for every trainable component of a fused model. Frozen
/// components carry no entries.
#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub towers: Vec<Gradients>,
    /// `None` for fixed gates.
    pub gates: Vec<Option<Gradients>>,
    pub experts: Vec<Gradients>,
}

impl FusionGradients {
    pub fn new(model: &FusedModel, unfreeze_experts: bool) -> Self {
        FusionGradients {
            towers: model.towers.iter().map(|t| Gradients::for_params(&t.layers, true)).collect(),
            gates: model
                .gates
                .iter()
                .map(|g| g.linear.as_ref().map(|p| Gradients::for_params(p, true)))
                .collect(),
            experts: model
                .experts
                .iter()
                .map(|e| Gradients::for_params(&e.encoder, unfreeze_experts))
                .collect(),
        }
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut Gradients> {
        self.towers
            .iter_mut()
            .chain(self.gates.iter_mut().flatten())
            .chain(self.experts.iter_mut())
    }

    pub fn zero(&mut self) {
        self.all_mut().for_each(Gradients::zero);
    }

    pub fn scale(&mut self, factor: f64) {
        self.all_mut().for_each(|g| g.scale(factor));
    }
}

/// Index of each data class in the model's label map, matched by name.
fn remap_labels(model_map: &LabelMap, data_map: &LabelMap, task: &str) -> Result<Vec<usize>> {
    data_map
        .names()
        .iter()
        .map(|n| {
            model_map.index(n).ok_or_else(|| {
                Error::Dataset(format!("class {n:?} of task {task:?} is unknown to the fused model"))
            })
        })
        .collect()
}

/// A dataset with labels translated to the model's tasks and, for frozen
/// experts, cached representations.
#[derive(Debug, Clone)]
pub struct PreparedData<'a> {
    pub data: &'a LabeledDataset,
    /// Per sample, per model task, the model's class index.
    pub labels: Vec<Vec<usize>>,
    /// Per sample, per expert, the eval-mode representation.
    pub stacked: Vec<Vec<Vec<f64>>>,
}

impl FusedModel {
    /// Translates labels by task id and class name; fails on any task the
    /// data does not label.
    pub fn map_labels(&self, data: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
        data.validate()?;
        let mut per_task = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let d = data.task_ids.iter().position(|id| *id == t.task_id).ok_or_else(|| {
                Error::Dataset(format!("data carries no labels for task {:?}", t.task_id))
            })?;
            per_task.push((d, remap_labels(&t.label_map, &data.label_maps[d], &t.task_id)?));
        }
        Ok(data
            .samples
            .iter()
            .map(|s| per_task.iter().map(|(d, map)| map[s.labels[*d]]).collect())
            .collect())
    }

    pub fn prepare<'a>(&self, data: &'a LabeledDataset) -> Result<PreparedData<'a>> {
        let labels = self.map_labels(data)?;
        if let Some(dim) = data.feature_dim() {
            check_len(self.input_dim(), dim, "fusion data features")?;
        }
        let stacked = data
            .samples
            .iter()
            .map(|s| super::concat_representations(&self.experts, &s.features))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedData { data, labels, stacked })
    }

    /// Loss of the selected tasks on one sample, accumulating gradients.
    /// Returns the unweighted per-task cross-entropies (0 for unselected
    /// tasks). `enc_traces` is given only when experts are being trained.
    #[allow(clippy::too_many_arguments)]
    fn sample_backward(
        &self,
        x: &[f64],
        stacked: &[Vec<f64>],
        enc_traces: Option<&[EncoderTrace]>,
        labels: &[usize],
        tasks: &[bool],
        train_mode: bool,
        stream: DropoutStream,
        grads: &mut FusionGradients,
    ) -> Result<Vec<f64>> {
        let mut losses = vec![0.0; self.tasks.len()];
        let mut d_reps: Option<Vec<Vec<f64>>> =
            enc_traces.map(|_| stacked.iter().map(|r| vec![0.0; r.len()]).collect());
        for k in (0..self.tasks.len()).filter(|&k| tasks[k]) {
            let gate = &self.gates[k];
            let delta = gate.delta(x)?;
            let gated = mix(&delta, stacked)?;
            let tr = tower_forward(&self.towers[k], &gated, train_mode, stream.fork(k as u64))?;
            losses[k] = cross_entropy(tr.probabilities(), labels[k])?;
            let need_input = gate.linear.is_some() || d_reps.is_some();
            let d_gated = mlp_backward_ce(
                &self.towers[k].layers,
                &tr,
                labels[k],
                self.tasks[k].loss_weight,
                &mut grads.towers[k],
                need_input,
            )?;
            if need_input {
                let per_expert =
                    gate.backward(x, stacked, &delta, &d_gated, grads.gates[k].as_mut(), d_reps.is_some())?;
                if let Some(acc) = &mut d_reps {
                    for (a, d) in acc.iter_mut().zip(per_expert) {
                        a.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        if let (Some(traces), Some(d_reps)) = (enc_traces, d_reps) {
            for (j, (tr, d)) in traces.iter().zip(&d_reps).enumerate() {
                encoder_backward(&self.experts[j].encoder, tr, d, &mut grads.experts[j])?;
            }
        }
        Ok(losses)
    }

    /// Mean per-task losses over `indices` (all samples when `None`) and the
    /// gradient of the mean weighted loss over the selected tasks. Experts
    /// are treated as frozen.
    pub fn loss_gradients(
        &self,
        prep: &PreparedData,
        indices: Option<&[usize]>,
        tasks: &[bool],
        train_mode: bool,
        stream: DropoutStream,
    ) -> Result<(Vec<f64>, FusionGradients)> {
        check_len(self.tasks.len(), tasks.len(), "task selection")?;
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..prep.labels.len()).collect();
                &all
            }
        };
        if idx.is_empty() {
            return Err(Error::Dataset("no samples to evaluate".into()));
        }
        let mut grads = FusionGradients::new(self, false);
        let mut totals = vec![0.0; self.tasks.len()];
        for (n, &i) in idx.iter().enumerate() {
            let losses = self.sample_backward(
                prep.data.samples[i].features.flat(),
                &prep.stacked[i],
                None,
                &prep.labels[i],
                tasks,
                train_mode,
                stream.fork(n as u64),
                &mut grads,
            )?;
            totals.iter_mut().zip(losses).for_each(|(t, l)| *t += l);
        }
        let inv = 1.0 / idx.len() as f64;
        grads.scale(inv);
        Ok((totals.into_iter().map(|t| t * inv).collect(), grads))
    }

    /// Eval-mode mean per-task loss and accuracy.
    pub fn evaluate_prepared(&self, prep: &PreparedData) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.tasks.len();
        let n = prep.labels.len();
        if n == 0 {
            return Err(Error::Dataset("empty evaluation set".into()));
        }
        let mut loss = vec![0.0; k];
        let mut correct = vec![0usize; k];
        for i in 0..n {
            let c = self.classify_with(&prep.stacked[i], prep.data.samples[i].features.flat())?;
            for t in 0..k {
                loss[t] += cross_entropy(&c.confidences[t], prep.labels[i][t])?;
                correct[t] += usize::from(argmax(&c.confidences[t]) == prep.labels[i][t]);
            }
        }
        Ok((
            loss.into_iter().map(|l| l / n as f64).collect(),
            correct.into_iter().map(|c| c as f64 / n as f64).collect(),
        ))
    }

    /// `Σ α_k L_k` from per-task losses.
    pub fn weighted_total(&self, task_losses: &[f64]) -> f64 {
        self.tasks.iter().zip(task_losses).map(|(t, l)| t.loss_weight * l).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneEpoch {
    /// 1-based.
    pub epoch: usize,
    /// Mean of `Σ α_k L_k` over the epoch's training samples.
    pub total_loss: f64,
    pub task_losses: Vec<f64>,
    pub val_total_loss: Option<f64>,
    /// Per-task validation accuracy; empty without validation data.
    pub val_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneTrace {
    pub task_ids: Vec<String>,
    pub epochs: Vec<FineTuneEpoch>,
}

impl FineTuneTrace {
    pub fn total_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total_loss).collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut head = vec!["epoch".to_string(), "total_loss".into()];
        head.extend(self.task_ids.iter().map(|t| format!("{t}_loss")));
        head.push("val_total_loss".into());
        head.extend(self.task_ids.iter().map(|t| format!("{t}_val_acc")));
        writeln!(out, "{}", head.join(","))?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.total_loss.to_string()];
            row.extend(e.task_losses.iter().map(f64::to_string));
            row.push(e.val_total_loss.map(|v| v.to_string()).unwrap_or_default());
            if e.val_acc.is_empty() {
                row.extend(self.task_ids.iter().map(|_| String::new()));
            } else {
                row.extend(e.val_acc.iter().map(f64::to_string));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Trains towers (and trainable gates) on the weighted multi-task loss.
/// Expert encoders stay bit-identical unless `unfreeze_experts` is set.
/// Every task must be labelled in `train`; this is checked before any update.
pub fn fine_tune(
    model: &mut FusedModel,
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    unfreeze_experts: bool,
) -> Result<FineTuneTrace> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("fine-tune data is empty".into()));
    }
    let mut prep_owned = model.prepare(train)?;
    if let Some(v) = validation {
        model.map_labels(v)?;
    }

    let k = model.tasks.len();
    let all_tasks = vec![true; k];
    let mut tower_state: Vec<AdamState> = model.towers.iter().map(|t| AdamState::new(&t.layers)).collect();
    let mut gate_state: Vec<Option<AdamState>> =
        model.gates.iter().map(|g| g.linear.as_ref().map(AdamState::new)).collect();
    let mut expert_state: Vec<AdamState> = model.experts.iter().map(|e| AdamState::new(&e.encoder)).collect();
    let mut grads = FusionGradients::new(model, unfreeze_experts);
    let base = DropoutStream::new(cfg.seed);
    let mut step: u64 = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sums = vec![0.0; k];
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let step_stream = base.fork(step);
            for (n, &i) in batch.iter().enumerate() {
                let stream = step_stream.fork(n as u64);
                let x = train.samples[i].features.flat();
                let losses = if unfreeze_experts {
                    let traces = model
                        .experts
                        .iter()
                        .enumerate()
                        .map(|(j, e)| {
                            encoder_forward_traced(&e.encoder_cfg, &e.encoder, x, true, stream.fork(1 << 32 | j as u64))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let stacked: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
                    model.sample_backward(x, &stacked, Some(&traces), &prep_owned.labels[i], &all_tasks, true, stream, &mut grads)?
                } else {
                    model.sample_backward(x, &prep_owned.stacked[i], None, &prep_owned.labels[i], &all_tasks, true, stream, &mut grads)?
                };
                sums.iter_mut().zip(losses).for_each(|(s, l)| *s += l);
            }
            grads.scale(1.0 / batch.len() as f64);
            for (t, (tw, st)) in model.towers.iter_mut().zip(&mut tower_state).enumerate() {
                adam_step(&mut tw.layers, &grads.towers[t], st, cfg.learning_rate)?;
            }
            for ((g, st), gr) in model.gates.iter_mut().zip(&mut gate_state).zip(&grads.gates) {
                if let (Some(p), Some(st), Some(gr)) = (g.linear.as_mut(), st.as_mut(), gr.as_ref()) {
                    adam_step(p, gr, st, cfg.learning_rate)?;
                }
            }
            if unfreeze_experts {
                for ((e, st), gr) in model.experts.iter_mut().zip(&mut expert_state).zip(&grads.experts) {
                    adam_step(&mut e.encoder, gr, st, cfg.learning_rate)?;
                }
            }
            step += 1;
        }
        let task_losses: Vec<f64> = sums.iter().map(|s| s / train.len() as f64).collect();
        let total_loss = model.weighted_total(&task_losses);
        if !total_loss.is_finite() {
            return Err(Error::Diagnostic(format!("non-finite fine-tune loss at epoch {}", epoch + 1)));
        }
        if unfreeze_experts {
            prep_owned = model.prepare(train)?;
        }
        let (val_total_loss, val_acc) = match validation {
            Some(v) if !v.is_empty() => {
                let vp = model.prepare(v)?;
                let (l, a) = model.evaluate_prepared(&vp)?;
                (Some(model.weighted_total(&l)), a)
            }
            _ => (None, Vec::new()),
        };
        log::debug!("fine-tune epoch {} total_loss {total_loss:.5}", epoch + 1);
        epochs.push(FineTuneEpoch {
            epoch: epoch + 1,
            total_loss,
            task_losses,
            val_total_loss,
            val_acc,
        });
    }
    Ok(FineTuneTrace {
        task_ids: model.tasks.iter().map(|t| t.task_id.clone()).collect(),
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::expert::ExpertModel;
    use crate::fusion::{configure_fusion, FusionOptions, TaskRelation};
    use crate::ingest::FeatureVector;
    use crate::nn::EncoderConfig;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            tokens: 3,
            width: 4,
            heads: 2,
            ff_dim: 6,
            dropout: 0.1,
        }
    }

    fn model() -> FusedModel {
        let e = |id: &str, seed| {
            ExpertModel::init(id, id, LabelMap::new(["n", "p"]).unwrap(), cfg(), 0.1, seed).unwrap()
        };
        configure_fusion(vec![e("a", 1), e("b", 2)], vec![TaskRelation::independent(["a", "b"])], &FusionOptions::default())
            .unwrap()
    }

    fn data(tasks: &[&str]) -> LabeledDataset {
        let samples = (0..8)
            .map(|i| Sample {
                id: i.to_string(),
                source: String::new(),
                features: FeatureVector::from_flat(4, (0..12).map(|j| ((i * 5 + j) % 7) as f64 / 7.0).collect())
                    .unwrap(),
                labels: tasks.iter().enumerate().map(|(t, _)| (i + t) % 2).collect(),
            })
            .collect();
        LabeledDataset::new(
            tasks.iter().map(|t| t.to_string()).collect(),
            tasks.iter().map(|_| LabelMap::new(["n", "p"]).unwrap()).collect(),
            samples,
        )
        .unwrap()
    }

    #[test]
    fn missing_task_rejected_before_update() {
        let mut m = model();
        let before = m.clone();
        let err = fine_tune(&mut m, &data(&["a"]), None, &TrainConfig::default(), false).unwrap_err();
        assert!(err.to_string().contains("\"b\""), "{err}");
        assert_eq!(m, before);
    }

    #[test]
    fn frozen_experts_untouched_and_towers_move() {
        let mut m = model();
        let before = m.clone();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let trace = fine_tune(&mut m, &data(&["b", "a"]), Some(&data(&["a", "b"])), &tc, false).unwrap();
        assert_eq!(trace.epochs.len(), 2);
        assert_eq!(trace.epochs[0].val_acc.len(), 2);
        for (a, b) in m.experts.iter().zip(&before.experts) {
            assert!(a.encoder.bit_eq(&b.encoder) && a.head.bit_eq(&b.head));
        }
        assert!(!m.towers[0].layers.bit_eq(&before.towers[0].layers));
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,total_loss,a_loss,b_loss,val_total_loss"));
    }

    #[test]
    fn unfreezing_moves_experts() {
        let mut m = model();
        let before = m.clone();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        fine_tune(&mut m, &data(&["a", "b"]), None, &tc, true).unwrap();
        assert!(!m.experts[0].encoder.bit_eq(&before.experts[0].encoder));
    }

    #[test]
    fn isolation_and_no_expert_entries() {
        let m = model();
        let d = data(&["a", "b"]);
        let prep = m.prepare(&d).unwrap();
        let (_, g) = m.loss_gradients(&prep, None, &[true, false], true, DropoutStream::new(1)).unwrap();
        assert!(g.towers[1].flatten().iter().all(|v| *v == 0.0));
        assert!(g.towers[0].flatten().iter().any(|v| *v != 0.0));
        assert!(g.experts.iter().all(|e| e.num_entries() == 0));
    }
}

use std::io::Write;

use crate::dataset::{LabelMap, LabeledDataset};
use crate::error::{Error, Result};
use crate::expert::ExpertModel;
use crate::fusion::FusedModel;
use crate::ingest::FeatureVector;
use crate::nn::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
}

/// Metrics from index pairs. Macro averages skip classes that appear in
/// neither the truth nor the predictions.
pub fn compute_metrics(truth: &[usize], predicted: &[usize], labels: &LabelMap) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Dataset("cannot compute metrics on an empty set".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: predicted.len(),
            context: "predictions",
        });
    }
    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: k,
            });
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let (mut sp, mut sr, mut sf, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let pred: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && pred == 0 {
            continue;
        }
        present += 1;
        let p = if pred > 0 { tp / pred as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        sp += p;
        sr += r;
        sf += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let m = present as f64;
    Ok(Metrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_precision: sp / m,
        macro_recall: sr / m,
        macro_f1: sf / m,
        confusion,
        class_names: labels.names().to_vec(),
    })
}

impl Metrics {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "metric,value")?;
        writeln!(out, "accuracy,{}", self.accuracy)?;
        writeln!(out, "macro_precision,{}", self.macro_precision)?;
        writeln!(out, "macro_recall,{}", self.macro_recall)?;
        writeln!(out, "macro_f1,{}", self.macro_f1)?;
        Ok(())
    }

    pub fn write_confusion_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "truth\\predicted,{}", self.class_names.join(","))?;
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(out, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Anything that assigns class probabilities for a named task.
pub trait TaskPredictor {
    fn label_map(&self, task_id: &str) -> Result<&LabelMap>;
    fn predict_task(&self, x: &FeatureVector, task_id: &str) -> Result<Vec<f64>>;
}

impl TaskPredictor for ExpertModel {
    fn label_map(&self, task_id: &str) -> Result<&LabelMap> {
        if task_id != self.task_id {
            return Err(Error::Config(format!(
                "expert {:?} classifies task {:?}, not {task_id:?}",
                self.id, self.task_id
            )));
        }
        Ok(&self.label_map)
    }

    fn predict_task(&self, x: &FeatureVector, task_id: &str) -> Result<Vec<f64>> {
        self.label_map(task_id)?;
        self.predict(x.flat())
    }
}

impl TaskPredictor for FusedModel {
    fn label_map(&self, task_id: &str) -> Result<&LabelMap> {
        Ok(&self.tasks[self.task_index(task_id)?].label_map)
    }

    fn predict_task(&self, x: &FeatureVector, task_id: &str) -> Result<Vec<f64>> {
        let k = self.task_index(task_id)?;
        Ok(self.classify(x)?.confidences.swap_remove(k))
    }
}

/// Truth and predicted class indices over the model's classes followed by
/// any data classes the model does not know (which it can never predict).
pub fn predictions(
    model: &dyn TaskPredictor,
    data: &LabeledDataset,
    task_id: &str,
) -> Result<(Vec<usize>, Vec<usize>, LabelMap)> {
    let t = data.task_index(task_id)?;
    let model_map = model.label_map(task_id)?.clone();
    let mut names = model_map.names().to_vec();
    for n in data.label_maps[t].names() {
        if model_map.index(n).is_none() {
            names.push(n.clone());
        }
    }
    let joint = LabelMap::new(names)?;
    let mut truth = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    for s in &data.samples {
        let name = data.label_maps[t].name(s.labels[t]).unwrap_or_default();
        truth.push(joint.index(name).expect("joint map holds every data class"));
        pred.push(argmax(&model.predict_task(&s.features, task_id)?));
    }
    Ok((truth, pred, joint))
}

pub fn evaluate(model: &dyn TaskPredictor, test: &LabeledDataset, task_id: &str) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let (truth, pred, joint) = predictions(model, test, task_id)?;
    compute_metrics(&truth, &pred, &joint)
}

/// Metrics per source domain, in first-seen domain order.
pub fn evaluate_by_source(
    model: &dyn TaskPredictor,
    test: &LabeledDataset,
    task_id: &str,
) -> Result<Vec<(String, Metrics)>> {
    let mut sources: Vec<String> = Vec::new();
    for s in &test.samples {
        if !sources.contains(&s.source) {
            sources.push(s.source.clone());
        }
    }
    sources
        .into_iter()
        .map(|src| {
            let part = test.filter(|s| s.source == src);
            evaluate(model, &part, task_id).map(|m| (src, m))
        })
        .collect()
}

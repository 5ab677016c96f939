use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FeatureVector;

/// Ordered class-name table; a class's index is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("duplicate class name in label map".into()));
        }
        Ok(LabelMap { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Source dataset / domain the sample came from.
    pub source: String,
    pub features: FeatureVector,
    /// One label index per task, aligned with `LabeledDataset::task_ids`.
    pub labels: Vec<usize>,
}

/// Feature vectors with one label per declared task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LabeledDataset {
    pub task_ids: Vec<String>,
    pub label_maps: Vec<LabelMap>,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(task_ids: Vec<String>, label_maps: Vec<LabelMap>, samples: Vec<Sample>) -> Result<Self> {
        let d = LabeledDataset {
            task_ids,
            label_maps,
            samples,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_ids.len() != self.label_maps.len() {
            return Err(Error::Dataset("one label map per task required".into()));
        }
        let mut dim = None;
        for s in &self.samples {
            if s.labels.len() != self.task_ids.len() {
                return Err(Error::Dataset(format!(
                    "sample {} has {} labels for {} tasks",
                    s.id,
                    s.labels.len(),
                    self.task_ids.len()
                )));
            }
            for (l, m) in s.labels.iter().zip(&self.label_maps) {
                if *l >= m.len() {
                    return Err(Error::LabelOutOfRange {
                        label: *l,
                        classes: m.len(),
                    });
                }
            }
            let n = s.features.len();
            if *dim.get_or_insert(n) != n {
                return Err(Error::Dataset("samples disagree on feature dimension".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.task_ids
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::Dataset(format!("unknown task {task:?}")))
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    /// Sample counts per class of one task.
    pub fn class_counts(&self, task: usize) -> Vec<usize> {
        let mut counts = vec![0; self.label_maps[task].len()];
        for s in &self.samples {
            counts[s.labels[task]] += 1;
        }
        counts
    }

    /// Copy restricted to one task.
    pub fn single_task(&self, task: &str) -> Result<LabeledDataset> {
        let t = self.task_index(task)?;
        Ok(LabeledDataset {
            task_ids: vec![self.task_ids[t].clone()],
            label_maps: vec![self.label_maps[t].clone()],
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    labels: vec![s.labels[t]],
                    ..s.clone()
                })
                .collect(),
        })
    }

    /// Samples at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            task_ids: self.task_ids.clone(),
            label_maps: self.label_maps.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Samples whose class for `task` is among `classes`, relabelled
    /// against a label map holding just those classes (in the given order).
    pub fn restrict_classes(&self, task: &str, classes: &[&str]) -> Result<LabeledDataset> {
        let t = self.task_index(task)?;
        let old = &self.label_maps[t];
        let new = LabelMap::new(classes.iter().copied())?;
        let remap: Vec<Option<usize>> = old.names().iter().map(|n| new.index(n)).collect();
        if let Some(missing) = classes.iter().find(|c| old.index(c).is_none()) {
            return Err(Error::Dataset(format!("task {task:?} has no class {missing:?}")));
        }
        let mut label_maps = self.label_maps.clone();
        label_maps[t] = new;
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                remap[s.labels[t]].map(|l| {
                    let mut s = s.clone();
                    s.labels[t] = l;
                    s
                })
            })
            .collect();
        LabeledDataset::new(self.task_ids.clone(), label_maps, samples)
    }

    /// Concatenation of datasets over the same tasks. Each task's label map
    /// becomes the union of the parts' maps (first-seen order, shared names
    /// merged) and labels are translated by class name.
    pub fn merge(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dataset("nothing to merge".into()))?;
        let mut label_maps = Vec::with_capacity(first.task_ids.len());
        for t in 0..first.task_ids.len() {
            let mut names: Vec<String> = Vec::new();
            for p in parts {
                if p.task_ids != first.task_ids {
                    return Err(Error::Dataset("merged datasets must declare the same tasks".into()));
                }
                for n in p.label_maps[t].names() {
                    if !names.contains(n) {
                        names.push(n.clone());
                    }
                }
            }
            label_maps.push(LabelMap::new(names)?);
        }
        let mut samples = Vec::new();
        for p in parts {
            for s in &p.samples {
                let mut s = s.clone();
                for (t, l) in s.labels.iter_mut().enumerate() {
                    let name = p.label_maps[t].name(*l).expect("validated label");
                    *l = label_maps[t].index(name).expect("union holds every name");
                }
                samples.push(s);
            }
        }
        LabeledDataset::new(first.task_ids.clone(), label_maps, samples)
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> LabeledDataset {
        LabeledDataset {
            task_ids: self.task_ids.clone(),
            label_maps: self.label_maps.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

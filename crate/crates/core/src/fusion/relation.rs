use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Independent attributes, one expert per task.
    ModeI,
    /// Category expansion: one task whose classes are the union of the experts' classes.
    ModeII,
    /// Category refinement: a coarse task and a fine task nested under it.
    ModeIII,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().trim_start_matches("MODE").trim_start_matches(['-', '_', ' ']) {
            "I" | "1" => Ok(FusionMode::ModeI),
            "II" | "2" => Ok(FusionMode::ModeII),
            "III" | "3" => Ok(FusionMode::ModeIII),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

/// One task handled by an independent (Mode I) fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentTask {
    pub task_id: String,
    pub expert: usize,
}

/// Declared relationship between tasks and experts. Modes are never
/// inferred from labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskRelation {
    Independent {
        tasks: Vec<IndependentTask>,
    },
    Expansion {
        task_id: String,
        experts: Vec<usize>,
        /// Union label map; derived from the experts' label maps in expert
        /// order when absent.
        union: Option<LabelMap>,
    },
    Refinement {
        coarse_task: String,
        coarse: LabelMap,
        fine_task: String,
        fine: LabelMap,
        /// Coarse parent of each fine class, by index.
        parent: Vec<usize>,
        experts: Vec<usize>,
    },
}

impl TaskRelation {
    pub fn mode(&self) -> FusionMode {
        match self {
            TaskRelation::Independent { .. } => FusionMode::ModeI,
            TaskRelation::Expansion { .. } => FusionMode::ModeII,
            TaskRelation::Refinement { .. } => FusionMode::ModeIII,
        }
    }

    /// Mode I relation pairing expert `j` with task `task_ids[j]`.
    pub fn independent<S: Into<String>>(task_ids: impl IntoIterator<Item = S>) -> Self {
        TaskRelation::Independent {
            tasks: task_ids
                .into_iter()
                .enumerate()
                .map(|(expert, t)| IndependentTask {
                    task_id: t.into(),
                    expert,
                })
                .collect(),
        }
    }

    /// Label map for a ModeII union given the experts' own maps.
    pub(crate) fn union_map(union: Option<&LabelMap>, expert_maps: &[&LabelMap]) -> Result<LabelMap> {
        match union {
            Some(u) => {
                for m in expert_maps {
                    if let Some(missing) = m.names().iter().find(|n| u.index(n).is_none()) {
                        return Err(Error::Config(format!(
                            "union label map lacks expert class {missing:?}"
                        )));
                    }
                }
                Ok(u.clone())
            }
            None => {
                let mut seen = BTreeSet::new();
                let mut names = Vec::new();
                for m in expert_maps {
                    for n in m.names() {
                        if seen.insert(n.clone()) {
                            names.push(n.clone());
                        }
                    }
                }
                LabelMap::new(names)
            }
        }
    }

    pub(crate) fn check_nesting(coarse: &LabelMap, fine: &LabelMap, parent: &[usize]) -> Result<()> {
        if parent.len() != fine.len() {
            return Err(Error::Config(format!(
                "nesting map has {} entries for {} fine classes",
                parent.len(),
                fine.len()
            )));
        }
        if let Some(&p) = parent.iter().find(|&&p| p >= coarse.len()) {
            return Err(Error::Config(format!("nesting parent {p} outside the coarse label map")));
        }
        if let Some(c) = (0..coarse.len()).find(|c| !parent.contains(c)) {
            return Err(Error::Config(format!(
                "coarse class {:?} has no fine classes",
                coarse.name(c).unwrap_or("?")
            )));
        }
        Ok(())
    }
}

//! Fusion of trained experts under per-task gates and towers.
//!
//! Each task `k` owns a gate that mixes the experts' representations into
//! one vector and a tower that classifies it. Experts are locked once
//! fused; fine-tuning trains towers and trainable gates only.

mod gate;
mod relation;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use gate::{gate_output, mix, GateConfig, GateMode};
pub use relation::{FusionMode, IndependentTask, TaskRelation};
pub use train::{fine_tune, FineTuneEpoch, FineTuneTrace, FusionGradients};

use crate::container::{parse_container, write_container};
use crate::dataset::LabelMap;
use crate::error::{check_len, Error, Result};
use crate::expert::{ExpertModel, HEAD_HIDDEN, MODEL_MAGIC};
use crate::ingest::FeatureVector;
use crate::nn::init::param_rng;
use crate::nn::mlp::{init_mlp, mlp_dims, mlp_forward, MlpTrace};
use crate::nn::{argmax, DropoutStream, ParamSet, Tensor};

pub const TOWER_HIDDEN: usize = HEAD_HIDDEN;
pub const DEFAULT_TOWER_DROPOUT: f64 = 0.2;

/// Per-task classifier `[rep_dim, 256, N]` on the gated vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub task_id: String,
    pub layers: ParamSet,
    pub dropout_rate: f64,
}

impl Tower {
    pub fn n_classes(&self) -> usize {
        mlp_dims(&self.layers).map(|d| d.2).unwrap_or(0)
    }
}

pub fn tower_forward(tower: &Tower, gated: &[f64], train_mode: bool, stream: DropoutStream) -> Result<MlpTrace> {
    mlp_forward(&tower.layers, gated, train_mode, tower.dropout_rate, stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedTask {
    pub task_id: String,
    pub label_map: LabelMap,
    /// α_k in the total loss.
    pub loss_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    pub experts: Vec<ExpertModel>,
    pub tasks: Vec<FusedTask>,
    /// Aligned with `tasks`.
    pub gates: Vec<GateConfig>,
    /// Aligned with `tasks`.
    pub towers: Vec<Tower>,
    pub relations: Vec<TaskRelation>,
}

#[derive(Debug, Clone)]
pub struct FusionOptions {
    pub seed: u64,
    pub tower_dropout: f64,
    /// α_k overrides by task id; unspecified tasks weigh 1.
    pub loss_weights: Vec<(String, f64)>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            seed: 0,
            tower_dropout: DEFAULT_TOWER_DROPOUT,
            loss_weights: Vec::new(),
        }
    }
}

/// Row `j` is expert `j`'s representation of `x`.
pub fn concat_representations(experts: &[ExpertModel], x: &FeatureVector) -> Result<Vec<Vec<f64>>> {
    experts.iter().map(|e| e.representation(x.flat())).collect()
}

/// Builds gates and fresh towers for the declared relations and locks the
/// experts.
pub fn configure_fusion(
    mut experts: Vec<ExpertModel>,
    relations: Vec<TaskRelation>,
    opts: &FusionOptions,
) -> Result<FusedModel> {
    let n = experts.len();
    let first = experts
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one expert".into()))?;
    let dim = first.input_dim();
    if let Some(e) = experts.iter().find(|e| e.input_dim() != dim) {
        return Err(Error::Config(format!(
            "expert {:?} takes {} inputs, expected {dim}",
            e.id,
            e.input_dim()
        )));
    }
    if relations.is_empty() {
        return Err(Error::Config("fusion needs at least one task relation".into()));
    }
    let check_expert = |j: usize| {
        if j >= n {
            Err(Error::Config(format!("relation references expert {j} but only {n} exist")))
        } else {
            Ok(())
        }
    };

    let mut tasks = Vec::new();
    let mut gates = Vec::new();
    for rel in &relations {
        match rel {
            TaskRelation::Independent { tasks: list } => {
                if list.is_empty() {
                    return Err(Error::Config("independent relation lists no tasks".into()));
                }
                for t in list {
                    check_expert(t.expert)?;
                    tasks.push((t.task_id.clone(), experts[t.expert].label_map.clone()));
                    gates.push(GateConfig::default_gate(&t.task_id, n, t.expert)?);
                }
            }
            TaskRelation::Expansion {
                task_id,
                experts: subset,
                union,
            } => {
                subset.iter().try_for_each(|&j| check_expert(j))?;
                let maps: Vec<&LabelMap> = subset.iter().map(|&j| &experts[j].label_map).collect();
                tasks.push((task_id.clone(), TaskRelation::union_map(union.as_ref(), &maps)?));
                gates.push(GateConfig::top_k(task_id, n, subset)?);
            }
            TaskRelation::Refinement {
                coarse_task,
                coarse,
                fine_task,
                fine,
                parent,
                experts: subset,
            } => {
                subset.iter().try_for_each(|&j| check_expert(j))?;
                TaskRelation::check_nesting(coarse, fine, parent)?;
                for (t, m) in [(coarse_task, coarse), (fine_task, fine)] {
                    tasks.push((t.clone(), m.clone()));
                    gates.push(GateConfig::trainable(t, n, subset, dim)?);
                }
            }
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    if let Some((t, _)) = tasks.iter().find(|(t, _)| !seen.insert(t.clone())) {
        return Err(Error::Config(format!("task {t:?} declared twice")));
    }
    for (t, _) in &opts.loss_weights {
        if !seen.contains(t) {
            return Err(Error::Config(format!("loss weight given for unknown task {t:?}")));
        }
    }
    if !(0.0..1.0).contains(&opts.tower_dropout) {
        return Err(Error::Config("tower dropout must lie in [0, 1)".into()));
    }

    let mut rng = param_rng(opts.seed);
    let mut towers = Vec::with_capacity(tasks.len());
    let mut fused_tasks = Vec::with_capacity(tasks.len());
    for (task_id, label_map) in tasks {
        if label_map.len() < 2 {
            return Err(Error::DegenerateTask(format!("fused task {task_id:?} has fewer than two classes")));
        }
        towers.push(Tower {
            task_id: task_id.clone(),
            layers: init_mlp(dim, TOWER_HIDDEN, label_map.len(), &mut rng)?,
            dropout_rate: opts.tower_dropout,
        });
        let loss_weight = opts
            .loss_weights
            .iter()
            .rev()
            .find(|(t, _)| *t == task_id)
            .map_or(1.0, |(_, w)| *w);
        if !(loss_weight.is_finite() && loss_weight >= 0.0) {
            return Err(Error::Config(format!("loss weight for {task_id:?} must be finite and non-negative")));
        }
        fused_tasks.push(FusedTask {
            task_id,
            label_map,
            loss_weight,
        });
    }
    for e in &mut experts {
        e.frozen = true;
    }
    let model = FusedModel {
        experts,
        tasks: fused_tasks,
        gates,
        towers,
        relations,
    };
    model.validate()?;
    Ok(model)
}

/// Output of one multi-attribute classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Predicted class index per task.
    pub labels: Vec<usize>,
    /// Confidence vector per task.
    pub confidences: Vec<Vec<f64>>,
}

impl FusedModel {
    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    pub fn task_index(&self, task_id: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Config(format!("fused model has no task {task_id:?}")))
    }

    pub fn mode(&self) -> Option<FusionMode> {
        let first = self.relations.first()?.mode();
        self.relations.iter().all(|r| r.mode() == first).then_some(first)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.tasks.len();
        if self.gates.len() != k || self.towers.len() != k {
            return Err(Error::Config("gates and towers must pair one-to-one with tasks".into()));
        }
        let dim = self.input_dim();
        for ((t, g), tw) in self.tasks.iter().zip(&self.gates).zip(&self.towers) {
            if g.task_id != t.task_id || tw.task_id != t.task_id {
                return Err(Error::Config(format!("gate/tower order does not match task {:?}", t.task_id)));
            }
            if g.n_experts != self.experts.len() {
                return Err(Error::Config("gate expert count differs from the model".into()));
            }
            g.validate(dim)?;
            let (i, _, o) = mlp_dims(&tw.layers)?;
            if i != dim || o != t.label_map.len() {
                return Err(Error::Config(format!("tower for {:?} has wrong dimensions", t.task_id)));
            }
        }
        Ok(())
    }

    /// Gated vector of task `k` given precomputed representations.
    pub fn gated(&self, k: usize, stacked: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
        gate_output(&self.gates[k], stacked, x)
    }

    /// Computes representations once, then runs every task's gate and tower.
    pub fn classify(&self, x: &FeatureVector) -> Result<Classification> {
        check_len(self.input_dim(), x.len(), "fused model input")?;
        let stacked = concat_representations(&self.experts, x)?;
        self.classify_with(&stacked, x.flat())
    }

    pub(crate) fn classify_with(&self, stacked: &[Vec<f64>], x: &[f64]) -> Result<Classification> {
        let mut labels = Vec::with_capacity(self.tasks.len());
        let mut confidences = Vec::with_capacity(self.tasks.len());
        for k in 0..self.tasks.len() {
            let g = self.gated(k, stacked, x)?;
            let c = tower_forward(&self.towers[k], &g, false, DropoutStream::new(0))?
                .probabilities()
                .to_vec();
            labels.push(argmax(&c));
            confidences.push(c);
        }
        Ok(Classification { labels, confidences })
    }

    pub fn classify_batch(&self, xs: &[FeatureVector]) -> Result<Vec<Classification>> {
        xs.iter().map(|x| self.classify(x)).collect()
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
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        let mut expert_headers = Vec::new();
        for (j, e) in self.experts.iter().enumerate() {
            expert_headers.push(e.header_json()?);
            tensors.extend(e.named_tensors(&format!("expert{j}.")));
        }
        let mut gates = Vec::new();
        for (k, g) in self.gates.iter().enumerate() {
            gates.push(GateHeader {
                task_id: g.task_id.clone(),
                mode: g.mode,
                subset: g.subset.clone(),
                n_experts: g.n_experts,
                fixed_delta: g.fixed_delta.clone(),
            });
            if let Some(p) = &g.linear {
                tensors.extend(p.iter().map(|(n, t)| (format!("gate{k}.{n}"), t)));
            }
        }
        let mut towers = Vec::new();
        for (k, tw) in self.towers.iter().enumerate() {
            towers.push(json!({"task_id": tw.task_id, "dropout_rate": tw.dropout_rate}));
            tensors.extend(tw.layers.iter().map(|(n, t)| (format!("tower{k}.{n}"), t)));
        }
        let header = json!({
            "kind": "fused",
            "experts": expert_headers,
            "tasks": self.tasks,
            "gates": gates,
            "towers": towers,
            "relations": self.relations,
        });
        write_container(out, MODEL_MAGIC, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = parse_container(bytes, MODEL_MAGIC)?;
        let h = &c.header;
        if h.get("kind").and_then(Value::as_str) != Some("fused") {
            return Err(Error::Format("model file does not hold a fused model".into()));
        }
        let field = |name: &str| {
            h.get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("fused header lacks {name:?}")))
        };
        let tensor = |name: &str| c.tensor(name).cloned();
        let expert_headers: Vec<Value> = serde_json::from_value(field("experts")?)?;
        let experts = expert_headers
            .iter()
            .enumerate()
            .map(|(j, eh)| ExpertModel::from_header_and_tensors(eh, &format!("expert{j}."), tensor))
            .collect::<Result<Vec<_>>>()?;
        if experts.is_empty() {
            return Err(Error::Format("fused model holds no experts".into()));
        }
        let tasks: Vec<FusedTask> = serde_json::from_value(field("tasks")?)?;
        let gate_headers: Vec<GateHeader> = serde_json::from_value(field("gates")?)?;
        let tower_headers: Vec<TowerHeader> = serde_json::from_value(field("towers")?)?;
        let relations: Vec<TaskRelation> = serde_json::from_value(field("relations")?)?;
        let dim = experts[0].input_dim();

        let mut gates = Vec::new();
        for (k, gh) in gate_headers.into_iter().enumerate() {
            let linear = if gh.mode == GateMode::Trainable {
                let mut p = ParamSet::new();
                for n in ["gate.w", "gate.b"] {
                    p.push(n, tensor(&format!("gate{k}.{n}"))?)?;
                }
                Some(p)
            } else {
                None
            };
            gates.push(GateConfig {
                task_id: gh.task_id,
                mode: gh.mode,
                subset: gh.subset,
                n_experts: gh.n_experts,
                fixed_delta: gh.fixed_delta,
                linear,
            });
        }
        let mut towers = Vec::new();
        for (k, th) in tower_headers.into_iter().enumerate() {
            let mut layers = ParamSet::new();
            for n in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
                layers.push(n, tensor(&format!("tower{k}.{n}"))?)?;
            }
            towers.push(Tower {
                task_id: th.task_id,
                layers,
                dropout_rate: th.dropout_rate,
            });
        }
        let model = FusedModel {
            experts,
            tasks,
            gates,
            towers,
            relations,
        };
        model
            .validate()
            .map_err(|e| Error::Format(format!("inconsistent fused model: {e}")))?;
        debug_assert_eq!(model.input_dim(), dim);
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GateHeader {
    task_id: String,
    mode: GateMode,
    subset: Vec<usize>,
    n_experts: usize,
    fixed_delta: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TowerHeader {
    task_id: String,
    dropout_rate: f64,
}

/// Reads either kind of model file and reports which it is.
pub fn model_kind(bytes: &[u8]) -> Result<String> {
    let c = parse_container(bytes, MODEL_MAGIC)?;
    c.header
        .get("kind")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Format("model header lacks kind".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            tokens: 3,
            width: 4,
            heads: 2,
            ff_dim: 6,
            dropout: 0.1,
        }
    }

    fn expert(id: &str, classes: &[&str], seed: u64) -> ExpertModel {
        ExpertModel::init(id, id, LabelMap::new(classes.iter().copied()).unwrap(), small_cfg(), 0.1, seed).unwrap()
    }

    fn fv(seed: u64) -> FeatureVector {
        let flat = (0..12).map(|i| ((i as u64 * 37 + seed * 11) % 17) as f64 / 17.0).collect();
        FeatureVector::from_flat(4, flat).unwrap()
    }

    #[test]
    fn mode_one_layout() {
        let m = configure_fusion(
            vec![expert("a", &["x", "y"], 1), expert("b", &["p", "q", "r"], 2)],
            vec![TaskRelation::independent(["a", "b"])],
            &FusionOptions::default(),
        )
        .unwrap();
        assert_eq!(m.gates.len(), 2);
        assert!(m.gates.iter().all(|g| g.mode == GateMode::Default));
        assert_eq!(m.towers[1].n_classes(), 3);
        assert!(m.experts.iter().all(|e| e.frozen));
        assert_eq!(m.mode(), Some(FusionMode::ModeI));
        let c = m.classify(&fv(3)).unwrap();
        assert_eq!(c.labels.len(), 2);
    }

    #[test]
    fn mode_two_union_tower() {
        let a: Vec<String> = (0..15).map(|i| format!("a{i}")).collect();
        let b: Vec<String> = (0..7).map(|i| format!("b{i}")).collect();
        let ea = ExpertModel::init("a", "app", LabelMap::new(a).unwrap(), small_cfg(), 0.1, 1).unwrap();
        let eb = ExpertModel::init("b", "app", LabelMap::new(b).unwrap(), small_cfg(), 0.1, 2).unwrap();
        let m = configure_fusion(
            vec![ea, eb],
            vec![TaskRelation::Expansion {
                task_id: "app".into(),
                experts: vec![0, 1],
                union: None,
            }],
            &FusionOptions::default(),
        )
        .unwrap();
        assert_eq!(m.towers.len(), 1);
        assert_eq!(m.towers[0].n_classes(), 22);
        assert_eq!(m.gates[0].fixed_delta, vec![0.5, 0.5]);
    }

    #[test]
    fn mode_three_and_bad_nesting() {
        let fine: Vec<String> = (0..10).map(|i| format!("tool{i}")).collect();
        let rel = |parent: Vec<usize>| TaskRelation::Refinement {
            coarse_task: "coarse".into(),
            coarse: LabelMap::new(["benign", "malicious"]).unwrap(),
            fine_task: "fine".into(),
            fine: LabelMap::new(fine.clone()).unwrap(),
            parent,
            experts: vec![0, 1],
        };
        let experts = || vec![expert("a", &["benign", "malicious"], 1), expert("b", &["t0", "t1"], 2)];
        let m = configure_fusion(experts(), vec![rel(vec![0, 0, 1, 1, 1, 0, 0, 1, 1, 1])], &FusionOptions::default())
            .unwrap();
        assert!(m.gates.iter().all(|g| g.mode == GateMode::Trainable));
        assert_eq!(m.towers[0].n_classes(), 2);
        assert_eq!(m.towers[1].n_classes(), 10);
        assert!(configure_fusion(experts(), vec![rel(vec![0; 10])], &FusionOptions::default()).is_err());
    }

    #[test]
    fn invalid_references_rejected() {
        let r = configure_fusion(
            vec![expert("a", &["x", "y"], 1)],
            vec![TaskRelation::Independent {
                tasks: vec![IndependentTask {
                    task_id: "a".into(),
                    expert: 1,
                }],
            }],
            &FusionOptions::default(),
        );
        assert!(r.is_err());
        let r = configure_fusion(
            vec![expert("a", &["x", "y"], 1)],
            vec![TaskRelation::independent(["a"])],
            &FusionOptions {
                loss_weights: vec![("nope".into(), 2.0)],
                ..FusionOptions::default()
            },
        );
        assert!(r.is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let fine: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
        let mut m = configure_fusion(
            vec![expert("a", &["benign", "malicious"], 1), expert("b", &["f0", "f1"], 2)],
            vec![TaskRelation::Refinement {
                coarse_task: "coarse".into(),
                coarse: LabelMap::new(["benign", "malicious"]).unwrap(),
                fine_task: "fine".into(),
                fine: LabelMap::new(fine).unwrap(),
                parent: vec![0, 1, 1],
                experts: vec![0, 1],
            }],
            &FusionOptions {
                loss_weights: vec![("fine".into(), 0.5)],
                ..FusionOptions::default()
            },
        )
        .unwrap();
        m.gates[0].randomize(&mut param_rng(3), 0.5);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(model_kind(&buf).unwrap(), "fused");
        let back = FusedModel::from_bytes(&buf).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.tasks[1].loss_weight, 0.5);
        let x = fv(9);
        assert_eq!(back.classify(&x).unwrap(), m.classify(&x).unwrap());
        assert!(FusedModel::from_bytes(&buf[..buf.len() - 1]).is_err());
        assert!(ExpertModel::from_bytes(&buf).is_err());
    }
}

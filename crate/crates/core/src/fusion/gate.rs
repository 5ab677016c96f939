//! Per-task gates: a mixing vector over experts applied to their stacked
//! representations.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::init::ParamRng;
use crate::nn::layers::{affine_rows, affine_rows_backward, dot, softmax_backward, softmax_in_place};
use crate::nn::{Gradients, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// One-hot on a single expert.
    Default,
    /// Uniform `1/|S|` over the subset.
    TopK,
    /// Input-conditioned softmax over the subset.
    Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub task_id: String,
    pub mode: GateMode,
    /// Experts the gate may mix, ascending and unique.
    pub subset: Vec<usize>,
    pub n_experts: usize,
    /// Fixed δ for Default and TopK gates; empty for Trainable.
    pub fixed_delta: Vec<f64>,
    /// `gate.w [|S|, in]`, `gate.b [|S|]` for Trainable gates.
    pub linear: Option<ParamSet>,
}

const GW: usize = 0;
const GB: usize = 1;

fn check_subset(subset: &[usize], n_experts: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::Config("gate expert subset is empty".into()));
    }
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != subset.len() {
        return Err(Error::Config("gate expert subset has duplicates".into()));
    }
    if let Some(&bad) = s.iter().find(|&&j| j >= n_experts) {
        return Err(Error::Config(format!(
            "gate references expert {bad} but only {n_experts} exist"
        )));
    }
    Ok(s)
}

impl GateConfig {
    pub fn default_gate(task_id: &str, n_experts: usize, expert: usize) -> Result<Self> {
        let subset = check_subset(&[expert], n_experts)?;
        let mut delta = vec![0.0; n_experts];
        delta[expert] = 1.0;
        Ok(GateConfig {
            task_id: task_id.into(),
            mode: GateMode::Default,
            subset,
            n_experts,
            fixed_delta: delta,
            linear: None,
        })
    }

    pub fn top_k(task_id: &str, n_experts: usize, subset: &[usize]) -> Result<Self> {
        let subset = check_subset(subset, n_experts)?;
        let mut delta = vec![0.0; n_experts];
        let w = 1.0 / subset.len() as f64;
        for &j in &subset {
            delta[j] = w;
        }
        Ok(GateConfig {
            task_id: task_id.into(),
            mode: GateMode::TopK,
            subset,
            n_experts,
            fixed_delta: delta,
            linear: None,
        })
    }

    /// Trainable gate with zero weights, so it starts as the uniform mix.
    pub fn trainable(task_id: &str, n_experts: usize, subset: &[usize], input_dim: usize) -> Result<Self> {
        let subset = check_subset(subset, n_experts)?;
        let mut p = ParamSet::new();
        p.push("gate.w", Tensor::zeros(&[subset.len(), input_dim]))?;
        p.push("gate.b", Tensor::zeros(&[subset.len()]))?;
        Ok(GateConfig {
            task_id: task_id.into(),
            mode: GateMode::Trainable,
            subset,
            n_experts,
            fixed_delta: Vec::new(),
            linear: Some(p),
        })
    }

    /// Random small gate weights; used to exercise non-uniform trainable gates.
    pub fn randomize(&mut self, rng: &mut ParamRng, scale: f64) {
        use rand::Rng;
        if let Some(p) = &mut self.linear {
            for slot in 0..p.len() {
                p.data_mut(slot)
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-scale..scale));
            }
        }
    }

    /// Checks the stored state against the mode's contract.
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let s = check_subset(&self.subset, self.n_experts)?;
        if s != self.subset {
            return Err(Error::Config("gate subset must be sorted".into()));
        }
        match self.mode {
            GateMode::Default | GateMode::TopK => {
                if self.mode == GateMode::Default && s.len() != 1 {
                    return Err(Error::Config("default gate selects exactly one expert".into()));
                }
                let w = 1.0 / s.len() as f64;
                let ok = self.fixed_delta.len() == self.n_experts
                    && self
                        .fixed_delta
                        .iter()
                        .enumerate()
                        .all(|(j, &d)| d == if s.contains(&j) { w } else { 0.0 });
                if !ok || self.linear.is_some() {
                    return Err(Error::Config("fixed gate weights violate the gate mode".into()));
                }
            }
            GateMode::Trainable => {
                let p = self
                    .linear
                    .as_ref()
                    .ok_or_else(|| Error::Config("trainable gate lacks weights".into()))?;
                let ok = p.len() == 2
                    && p.tensor(GW).shape() == [s.len(), input_dim]
                    && p.tensor(GB).shape() == [s.len()];
                if !ok {
                    return Err(Error::Config("trainable gate weight shapes are wrong".into()));
                }
            }
        }
        Ok(())
    }

    /// Softmax over S of the trainable gate's logits; `None` for fixed gates.
    fn subset_weights(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let Some(p) = &self.linear else {
            return Ok(None);
        };
        let in_dim = p.tensor(GW).shape()[1];
        check_len(in_dim, x.len(), "gate input")?;
        let mut z = affine_rows(x, 1, in_dim, p.data(GW), p.data(GB), self.subset.len());
        softmax_in_place(&mut z);
        Ok(Some(z))
    }

    /// Mixing vector δ over all experts for input `x`.
    pub fn delta(&self, x: &[f64]) -> Result<Vec<f64>> {
        let delta = match self.subset_weights(x)? {
            None => self.fixed_delta.clone(),
            Some(w) => {
                let mut d = vec![0.0; self.n_experts];
                for (&j, v) in self.subset.iter().zip(w) {
                    d[j] = v;
                }
                d
            }
        };
        debug_assert!(
            delta.iter().all(|&d| d >= 0.0)
                && (delta.iter().sum::<f64>() - 1.0).abs() < 1e-9
                && delta
                    .iter()
                    .enumerate()
                    .all(|(j, &d)| d == 0.0 || self.subset.contains(&j)),
            "gate weights left the simplex on S"
        );
        Ok(delta)
    }

    /// Gradient of a loss through the gate: accumulates into `grads` (for
    /// trainable gates) and returns `d stacked[j]` for each expert.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        stacked: &[Vec<f64>],
        delta: &[f64],
        d_gated: &[f64],
        grads: Option<&mut Gradients>,
        need_rep_grads: bool,
    ) -> Result<Vec<Vec<f64>>> {
        if let (Some(p), Some(g)) = (&self.linear, grads) {
            let in_dim = p.tensor(GW).shape()[1];
            let w_s: Vec<f64> = self.subset.iter().map(|&j| delta[j]).collect();
            let d_w: Vec<f64> = self.subset.iter().map(|&j| dot(d_gated, &stacked[j])).collect();
            let dz = softmax_backward(&w_s, &d_w);
            let (dw, db) = g.pair_mut(GW, GB);
            affine_rows_backward(x, 1, in_dim, p.data(GW), &dz, self.subset.len(), dw, db, false);
        }
        if !need_rep_grads {
            return Ok(Vec::new());
        }
        Ok(delta
            .iter()
            .map(|&d| d_gated.iter().map(|&g| d * g).collect())
            .collect())
    }
}

/// `Σ_j δ_j · stacked[j]`, skipping experts with zero weight so a one-hot
/// gate passes its expert's vector through unchanged.
pub fn mix(delta: &[f64], stacked: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_len(delta.len(), stacked.len(), "stacked representations")?;
    let dim = stacked.first().map(Vec::len).unwrap_or(0);
    let mut out: Option<Vec<f64>> = None;
    for (&d, row) in delta.iter().zip(stacked) {
        check_len(dim, row.len(), "expert representation")?;
        if d == 0.0 {
            continue;
        }
        match &mut out {
            None => out = Some(row.iter().map(|&v| d * v).collect()),
            Some(acc) => acc.iter_mut().zip(row).for_each(|(a, &v)| *a += d * v),
        }
    }
    Ok(out.unwrap_or_else(|| vec![0.0; dim]))
}

pub fn gate_output(gate: &GateConfig, stacked: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
    check_len(gate.n_experts, stacked.len(), "stacked representations")?;
    mix(&gate.delta(x)?, stacked)
}

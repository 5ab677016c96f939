//! Full-batch gradient descent on a single tower with experts and gate
//! held fixed: the setting in which the convergence bound is checked.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::convergence::{check_convergence, estimate_lipschitz, ConvergenceReport, LossTrace, Optimizer};
use crate::error::{Error, Result};
use crate::fusion::train::PreparedData;
use crate::fusion::FusedModel;
use crate::nn::mlp::{mlp_backward_ce, mlp_forward};
use crate::nn::{cross_entropy, sgd_step, DropoutStream, Gradients, ParamSet};

/// Mean eval-mode cross-entropy of one tower over fixed gated inputs.
#[derive(Debug, Clone)]
pub struct TowerProblem {
    gated: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl TowerProblem {
    pub fn new(model: &FusedModel, prep: &PreparedData, task: usize) -> Result<Self> {
        if task >= model.tasks.len() {
            return Err(Error::Config(format!("task index {task} out of range")));
        }
        if prep.labels.is_empty() {
            return Err(Error::Dataset("no samples for tower descent".into()));
        }
        let gated = prep
            .stacked
            .iter()
            .zip(&prep.data.samples)
            .map(|(st, s)| model.gated(task, st, s.features.flat()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TowerProblem {
            gated,
            labels: prep.labels.iter().map(|l| l[task]).collect(),
        })
    }

    pub fn loss(&self, params: &ParamSet) -> Result<f64> {
        let mut total = 0.0;
        for (g, &y) in self.gated.iter().zip(&self.labels) {
            let tr = mlp_forward(params, g, false, 0.0, DropoutStream::new(0))?;
            total += cross_entropy(tr.probabilities(), y)?;
        }
        Ok(total / self.labels.len() as f64)
    }

    pub fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::for_params(params, true);
        let w = 1.0 / self.labels.len() as f64;
        let mut total = 0.0;
        for (g, &y) in self.gated.iter().zip(&self.labels) {
            let tr = mlp_forward(params, g, false, 0.0, DropoutStream::new(0))?;
            total += cross_entropy(tr.probabilities(), y)?;
            mlp_backward_ce(params, &tr, y, w, &mut grads, false)?;
        }
        Ok((total * w, grads))
    }

    pub fn gradient(&self, params: &ParamSet) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(params)?.1.flatten())
    }
}

/// Runs `steps` plain GD updates. Returns the loss trace (length
/// `steps + 1`, starting at the initial point) and every iterate.
pub fn gradient_descent(
    problem: &TowerProblem,
    start: &ParamSet,
    learning_rate: f64,
    steps: usize,
) -> Result<(LossTrace, Vec<ParamSet>)> {
    let mut p = start.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    let mut snaps = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let (loss, g) = problem.loss_and_grad(&p)?;
        losses.push(loss);
        snaps.push(p.clone());
        if t < steps {
            sgd_step(&mut p, &g, learning_rate)?;
        }
    }
    Ok((
        LossTrace {
            losses,
            learning_rate,
            optimizer: Optimizer::FullBatchGd,
        },
        snaps,
    ))
}

/// Points `ω0 + ε·v_k` from power iteration on the Hessian via gradient
/// differences; pairs with `ω0` probe the steepest curvature.
pub fn curvature_probes(problem: &TowerProblem, start: &ParamSet, iterations: usize, seed: u64) -> Result<Vec<ParamSet>> {
    let base = start.flatten();
    let g0 = problem.gradient(start)?;
    let scale = base.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let eps = 1e-4 * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut probes = vec![start.clone()];
    for _ in 0..iterations {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let mut p = start.clone();
        p.assign_flat(&base.iter().zip(&v).map(|(b, d)| b + eps * d / norm).collect::<Vec<_>>())?;
        let g = problem.gradient(&p)?;
        v = g.iter().zip(&g0).map(|(a, b)| a - b).collect();
        probes.push(p);
    }
    Ok(probes)
}

#[derive(Debug, Clone)]
pub struct TowerConvergenceRun {
    pub report: ConvergenceReport,
    pub trace: LossTrace,
    /// Lipschitz estimate used to choose the step size.
    pub c_probe: f64,
}

/// Estimates `ĉ`, descends with `α = alpha_fraction / ĉ`, re-estimates
/// `ĉ` with the visited iterates included, and checks the bound.
pub fn tower_convergence_check(
    model: &FusedModel,
    prep: &PreparedData,
    task: usize,
    steps: usize,
    alpha_fraction: f64,
    seed: u64,
) -> Result<TowerConvergenceRun> {
    let problem = TowerProblem::new(model, prep, task)?;
    let start = &model.towers[task].layers;
    let probes = curvature_probes(&problem, start, 12, seed)?;
    let c_probe = estimate_lipschitz(|p| problem.gradient(p), &probes)?;
    let alpha = alpha_fraction / c_probe;
    let (trace, snaps) = gradient_descent(&problem, start, alpha, steps)?;
    let stride = (snaps.len() / 8).max(1);
    let mut all = probes;
    all.extend(snaps.iter().step_by(stride).cloned());
    let c_hat = estimate_lipschitz(|p| problem.gradient(p), &all)?;
    let report = check_convergence(&trace, c_hat, &snaps)?;
    Ok(TowerConvergenceRun { report, trace, c_probe })
}

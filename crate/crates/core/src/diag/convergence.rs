//! Empirical check of the gradient-descent convergence bound
//! `L(ω^T) − L(ω*) ≤ 1/(T · z · α · (1 − cα/2))` for `α ≤ 1/c`.
//!
//! The true optimum is unknowable, so the best observed iterate stands in
//! for `ω*`, and `z` is estimated as `min_t 1/‖ω^t − ω̂*‖²`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Plain gradient descent on the full batch.
    FullBatchGd,
    MiniBatchSgd,
    Adam,
}

/// Losses `L(ω^0), L(ω^1), …` of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
}

impl LossTrace {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Violation,
    AssumptionsNotMet,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Violation => "VIOLATION",
            Verdict::AssumptionsNotMet => "ASSUMPTIONS-NOT-MET",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub c_hat: f64,
    pub z_hat: f64,
    pub learning_rate: f64,
    /// Index of the best iterate, used in place of the optimum.
    pub best_step: usize,
    /// `L(ω^t) − L(ω̂*)` per step.
    pub gaps: Vec<f64>,
    /// Bound per step (`None` at t = 0); absent entirely when `α > 1/ĉ`.
    pub bound_curve: Option<Vec<Option<f64>>>,
    /// Steps t ≥ 1 whose loss exceeds the previous step's.
    pub violations: Vec<usize>,
    /// Steps where the gap exceeds the bound.
    pub bound_exceeded: Vec<usize>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max ‖∇L(ω_a) − ∇L(ω_b)‖ / ‖ω_a − ω_b‖` over snapshot pairs, skipping
/// identical pairs.
pub fn estimate_lipschitz(
    mut gradient: impl FnMut(&ParamSet) -> Result<Vec<f64>>,
    snapshots: &[ParamSet],
) -> Result<f64> {
    if snapshots.len() < 2 {
        return Err(Error::Diagnostic("Lipschitz estimate needs at least two snapshots".into()));
    }
    let flat: Vec<Vec<f64>> = snapshots.iter().map(ParamSet::flatten).collect();
    let grads = snapshots.iter().map(&mut gradient).collect::<Result<Vec<_>>>()?;
    let mut best: Option<f64> = None;
    for a in 0..flat.len() {
        for b in a + 1..flat.len() {
            if flat[a].len() != flat[b].len() || grads[a].len() != flat[a].len() || grads[b].len() != flat[a].len() {
                return Err(Error::Diagnostic("snapshots and gradients disagree in size".into()));
            }
            let d = sq_dist(&flat[a], &flat[b]).sqrt();
            if d == 0.0 {
                continue;
            }
            let ratio = sq_dist(&grads[a], &grads[b]).sqrt() / d;
            best = Some(best.map_or(ratio, |m: f64| m.max(ratio)));
        }
    }
    best.ok_or_else(|| Error::Diagnostic("all parameter snapshots are identical".into()))
}

/// Relative tolerance below which a loss change counts as flat.
const INCREASE_TOL: f64 = 1e-12;

/// Checks monotone descent and the bound. `snapshots[t]` must be the
/// parameters that produced `trace.losses[t]`.
pub fn check_convergence(trace: &LossTrace, c_hat: f64, snapshots: &[ParamSet]) -> Result<ConvergenceReport> {
    let l = &trace.losses;
    if l.is_empty() {
        return Err(Error::Diagnostic("empty loss trace".into()));
    }
    if snapshots.len() != l.len() {
        return Err(Error::Diagnostic(format!(
            "{} snapshots for {} loss values",
            snapshots.len(),
            l.len()
        )));
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diagnostic("loss trace contains non-finite values".into()));
    }
    if !(c_hat > 0.0 && c_hat.is_finite()) {
        return Err(Error::Diagnostic("Lipschitz estimate must be positive".into()));
    }
    let alpha = trace.learning_rate;
    let mut notes = Vec::new();

    let violations: Vec<usize> = (1..l.len())
        .filter(|&t| l[t] - l[t - 1] > INCREASE_TOL * l[t - 1].abs().max(1.0))
        .collect();
    let best_step = (0..l.len()).min_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap_or(0);
    let best = snapshots[best_step].flatten();
    let gaps: Vec<f64> = l.iter().map(|v| v - l[best_step]).collect();
    let z_hat = snapshots
        .iter()
        .map(|s| sq_dist(&s.flatten(), &best))
        .filter(|&d| d > 0.0)
        .map(|d| 1.0 / d)
        .fold(f64::INFINITY, f64::min);

    let step_ok = alpha <= 1.0 / c_hat;
    let bound_curve = (step_ok && z_hat.is_finite()).then(|| {
        let k = z_hat * alpha * (1.0 - c_hat * alpha / 2.0);
        (0..l.len())
            .map(|t| (t > 0).then(|| 1.0 / (t as f64 * k)))
            .collect::<Vec<_>>()
    });
    if !z_hat.is_finite() {
        notes.push("all iterates coincide with the best one; bound not evaluated".into());
    }
    let bound_exceeded: Vec<usize> = bound_curve
        .as_ref()
        .map(|b| {
            (1..l.len())
                .filter(|&t| b[t].is_some_and(|bt| gaps[t] > bt))
                .collect()
        })
        .unwrap_or_default();

    let gd = trace.optimizer == Optimizer::FullBatchGd;
    if !gd {
        notes.push(format!(
            "trace comes from {:?}, the bound assumes full-batch gradient descent",
            trace.optimizer
        ));
    }
    if !step_ok {
        notes.push(format!("learning rate {alpha} exceeds 1/c_hat = {}", 1.0 / c_hat));
    }
    notes.push("optimum approximated by the best observed iterate".into());
    let verdict = if !gd {
        Verdict::AssumptionsNotMet
    } else if !violations.is_empty() || !bound_exceeded.is_empty() {
        Verdict::Violation
    } else if !step_ok {
        Verdict::AssumptionsNotMet
    } else {
        Verdict::Pass
    };
    Ok(ConvergenceReport {
        c_hat,
        z_hat,
        learning_rate: alpha,
        best_step,
        gaps,
        bound_curve,
        violations,
        bound_exceeded,
        verdict,
        notes,
    })
}

impl ConvergenceReport {
    /// `t,gap,bound` rows; the bound is empty where undefined.
    pub fn write_csv(&self, losses: &[f64], mut out: impl Write) -> Result<()> {
        writeln!(out, "t,loss,gap,bound")?;
        for (t, (loss, gap)) in losses.iter().zip(&self.gaps).enumerate() {
            let b = self
                .bound_curve
                .as_ref()
                .and_then(|c| c[t])
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(out, "{t},{loss},{gap},{b}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "verdict: {}\nc_hat: {}\nz_hat: {}\nlearning_rate: {}\nbest_step: {}\nloss_increases: {}\nbound_exceeded: {}\n",
            self.verdict,
            self.c_hat,
            self.z_hat,
            self.learning_rate,
            self.best_step,
            self.violations.len(),
            self.bound_exceeded.len()
        );
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}

/// Plain GD on `L(w) = ½ c w²` from `w0`: the closed-form toy used to
/// sanity-check the checker. Returns the loss trace and iterates.
pub fn quadratic_descent(c: f64, alpha: f64, w0: f64, steps: usize) -> (LossTrace, Vec<ParamSet>) {
    let mut w = w0;
    let mut losses = Vec::with_capacity(steps + 1);
    let mut snaps = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        losses.push(0.5 * c * w * w);
        let mut p = ParamSet::new();
        p.push("w", crate::nn::Tensor::from_vec(&[1], vec![w]).expect("one value"))
            .expect("fresh set");
        snaps.push(p);
        if t < steps {
            w -= alpha * c * w;
        }
    }
    (
        LossTrace {
            losses,
            learning_rate: alpha,
            optimizer: Optimizer::FullBatchGd,
        },
        snaps,
    )
}

/// Estimates `ĉ` from the iterates of [`quadratic_descent`] and checks them.
pub fn check_quadratic(c: f64, alpha: f64, w0: f64, steps: usize) -> Result<ConvergenceReport> {
    let (trace, snaps) = quadratic_descent(c, alpha, w0, steps);
    let c_hat = estimate_lipschitz(|p| Ok(p.flatten().iter().map(|w| c * w).collect()), &snaps)?;
    check_convergence(&trace, c_hat, &snaps)
}

//! Detector for unhealthy trainable-gate fine-tuning: a loss that starts
//! climbing after a few epochs, or one source domain lagging far behind.

use super::metrics::Metrics;
use crate::error::{Error, Result};

pub const DEFAULT_GRACE_EPOCHS: usize = 4;
pub const DEFAULT_GAP_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    /// 1-based epochs after the grace period whose loss exceeds the previous epoch's.
    pub loss_increase_epochs: Vec<usize>,
    pub per_domain_accuracy: Vec<(String, f64)>,
    /// Max pairwise accuracy difference; `None` with fewer than two domains.
    pub gap: Option<f64>,
    pub loss_flag: bool,
    pub gap_flag: bool,
    pub flagged: bool,
    pub notes: Vec<String>,
}

/// `epoch_losses[e - 1]` is the loss of epoch `e`. The loss flag needs
/// increases after the grace period that are not undone: the final loss
/// must sit above the loss at the end of the grace period.
pub fn detect_gate_anomaly(
    epoch_losses: &[f64],
    per_domain: &[(String, Metrics)],
    grace_epochs: usize,
    gap_threshold: f64,
) -> Result<AnomalyReport> {
    if epoch_losses.len() < grace_epochs + 1 {
        return Err(Error::Diagnostic(format!(
            "need at least {} epochs, got {}",
            grace_epochs + 1,
            epoch_losses.len()
        )));
    }
    if epoch_losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diagnostic("loss trace contains non-finite values".into()));
    }
    let mut notes = Vec::new();
    let loss_increase_epochs: Vec<usize> = (grace_epochs.max(1) + 1..=epoch_losses.len())
        .filter(|&e| epoch_losses[e - 1] > epoch_losses[e - 2])
        .collect();
    let at_grace = epoch_losses[grace_epochs.max(1) - 1];
    let loss_flag = !loss_increase_epochs.is_empty() && *epoch_losses.last().expect("non-empty") > at_grace;

    let per_domain_accuracy: Vec<(String, f64)> = per_domain.iter().map(|(d, m)| (d.clone(), m.accuracy)).collect();
    let gap = if per_domain_accuracy.len() < 2 {
        notes.push("fewer than two domains; accuracy gap check skipped".into());
        None
    } else {
        let hi = per_domain_accuracy.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        let lo = per_domain_accuracy.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    };
    let gap_flag = gap.is_some_and(|g| g > gap_threshold);
    if loss_flag {
        notes.push(format!("loss rose after epoch {grace_epochs} and did not recover"));
    }
    if gap_flag {
        notes.push(format!("per-domain accuracy gap exceeds {gap_threshold}"));
    }
    Ok(AnomalyReport {
        loss_increase_epochs,
        per_domain_accuracy,
        gap,
        loss_flag,
        gap_flag,
        flagged: loss_flag || gap_flag,
        notes,
    })
}

impl AnomalyReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "flagged: {}\nloss_flag: {}\nloss_increase_epochs: {:?}\ngap: {}\n",
            self.flagged,
            self.loss_flag,
            self.loss_increase_epochs,
            self.gap.map(|g| g.to_string()).unwrap_or_else(|| "n/a".into())
        );
        for (d, a) in &self.per_domain_accuracy {
            s.push_str(&format!("domain {d}: accuracy {a}\n"));
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}

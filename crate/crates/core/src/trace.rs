use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Writes `epoch,train_loss,val_loss,val_acc`; missing validation values
/// are left empty.
pub fn write_epoch_csv(records: &[EpochRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,val_acc")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_acc)
        )?;
    }
    Ok(())
}

//! Run configuration: a TOML file with one section per stage. Every key is
//! optional and defaults to the reference hyperparameters.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use snake_core::fusion::FusionMode;
use snake_core::ingest::ExtractionConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub extraction: ExtractionSection,
    pub split: SplitSection,
    pub expert: ExpertSection,
    pub fusion: FusionSection,
    pub diag: DiagSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub payload_bytes: usize,
    pub packets: usize,
    pub payload_len_scale: f64,
    pub tcp_window_scale: f64,
    /// Seconds; inter-arrival times are divided by this and clamped to 1.
    pub iat_scale: f64,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        ExtractionSection {
            payload_bytes: 784,
            packets: 32,
            payload_len_scale: 1500.0,
            tcp_window_scale: 65535.0,
            iat_scale: 1.0,
        }
    }
}

impl ExtractionSection {
    pub fn to_core(&self) -> ExtractionConfig {
        ExtractionConfig {
            payload_bytes: self.payload_bytes,
            packets: self.packets,
            hdr_scales: [self.payload_len_scale, self.tcp_window_scale, self.iat_scale, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.75,
            validation: 0.10,
            test: 0.15,
        }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train, self.validation, self.test)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
}

impl Default for ExpertSection {
    fn default() -> Self {
        ExpertSection {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Per-mode default when absent: 1e-4 for Mode I, 1e-3 otherwise.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Per-mode default when absent: 5 for Mode I, 10 otherwise.
    pub epochs: Option<usize>,
    pub tower_dropout: f64,
    /// α_k by task id.
    pub loss_weights: BTreeMap<String, f64>,
    /// Mode II task id; defaults to the experts' shared task id.
    pub task: Option<String>,
    /// Mode III task ids.
    pub coarse_task: Option<String>,
    pub fine_task: Option<String>,
    /// Coarse class of each fine class, in the feature file's fine-class
    /// order. Derived from co-labelled samples when empty.
    pub parent: Vec<String>,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            learning_rate: None,
            batch_size: 128,
            epochs: None,
            tower_dropout: 0.2,
            loss_weights: BTreeMap::new(),
            task: None,
            coarse_task: None,
            fine_task: None,
            parent: Vec::new(),
        }
    }
}

impl FusionSection {
    pub fn learning_rate_for(&self, mode: FusionMode) -> f64 {
        self.learning_rate.unwrap_or(match mode {
            FusionMode::ModeI => 1e-4,
            _ => 1e-3,
        })
    }

    pub fn epochs_for(&self, mode: FusionMode) -> usize {
        self.epochs.unwrap_or(match mode {
            FusionMode::ModeI => 5,
            _ => 10,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSection {
    pub grace_epochs: usize,
    pub gap_threshold: f64,
    pub gd_steps: usize,
    pub alpha_fraction: f64,
    /// Samples used for tower descent (0 = all).
    pub gd_samples: usize,
}

impl Default for DiagSection {
    fn default() -> Self {
        DiagSection {
            grace_epochs: 4,
            gap_threshold: 0.15,
            gd_steps: 60,
            alpha_fraction: 0.5,
            gd_samples: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("config {} does not match the schema", p.display()))
            }
        }
    }

    /// SHA-256 of the effective configuration in canonical TOML.
    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self).context("serialising config")?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

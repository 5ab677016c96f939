//! Minimal fp64 neural-network kernel: tensors, the layers used by experts,
//! gates and towers, exact reverse-mode gradients, Adam/SGD and losses.

pub mod encoder;
pub mod init;
pub mod layers;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{encoder_backward, encoder_forward, encoder_forward_traced, EncoderConfig, EncoderTrace};
pub use layers::{linear_forward, relu, softmax, DropoutStream};
pub use loss::{argmax, cross_entropy};
pub use optim::{adam_step, sgd_step, AdamState};
pub use params::{Gradients, ParamSet};
pub use tensor::Tensor;

/// Optimization hyperparameters. Defaults are the expert settings:
/// Adam at 1e-3, dropout 0.2, batch 32, 50 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            dropout_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

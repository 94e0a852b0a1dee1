//! Gated attention-MIL regression of slide-level scores.

mod adam;
mod checkpoint;
mod linalg;
mod model;
mod params;
mod train;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, CHECKPOINT_MAGIC};
pub use model::{backward, forward, forward_masked, loss, loss_grad, predict, DropoutMask, ForwardTrace, Mode};
pub use params::{init_params, Gradients, ModelParams, ModelShape, Tensor};
pub use train::{explained_variance, train, train_with_observer, EpochRecord, TrainHistory, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lr: f64,
    pub weight_decay: f64,
    /// Bags per optimizer step.
    pub batch_size: usize,
    pub input_dim: usize,
    pub attn_hidden: usize,
    pub enc_out: usize,
    pub dropout_feature: f64,
    pub dropout_tile: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 6e-4,
            batch_size: 16,
            input_dim: 2048,
            attn_hidden: 128,
            enc_out: 512,
            dropout_feature: 0.4,
            dropout_tile: 0.1,
            max_epochs: 50,
            patience: 15,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidInput(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.input_dim == 0 || self.attn_hidden == 0 || self.enc_out == 0 {
            return bad("batch size and layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_feature) || !(0.0..1.0).contains(&self.dropout_tile) {
            return bad("dropout probabilities must lie in [0, 1)");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }
}

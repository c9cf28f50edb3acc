//! Forecasting architecture: multi-scale convolution branches with channel
//! attention feeding a bidirectional recurrent stack, multi-head
//! self-attention, temporal-attention pooling, a residual projection from
//! the convolutional features, a linear multi-horizon head, and a
//! gradient-reversed domain classifier — plus a plain recurrent baseline.

pub mod checkpoint;
pub mod forward;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, forward_lstm_baseline, ForwardOptions, ForwardOutput};
pub use params::{apply_bn_updates, init_baseline, init_model, BnStats, ModelKind, ModelParams};

/// Convolution kernel sizes of the three parallel branches.
pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];
/// Kernel size and dilation of the fourth, dilated branch.
pub const DILATED_KERNEL: usize = 3;
pub const DILATION: usize = 2;
/// Attention head count (fixed by the architecture).
pub const N_HEADS: usize = 8;
/// Bottleneck reduction of the channel-attention gate.
pub const CHANNEL_REDUCTION: usize = 4;
/// Hidden width of the domain classifier.
pub const DOMAIN_HIDDEN: usize = 64;
/// Momentum for batch-norm running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("model parameters missing '{0}' (wrong model kind for this operation?)")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Architecture hyperparameters. Every field must stay inside the stated
/// search space; `validate` reports all violations at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Convolution stages per branch (1 or 2).
    pub conv_layers: usize,
    /// Channels per convolution branch.
    pub cnn_hidden: usize,
    /// Stacked bidirectional recurrent layers.
    pub lstm_layers: usize,
    /// Hidden units per recurrent direction.
    pub lstm_hidden: usize,
    /// Dropout after each convolution stage (0 disables).
    pub cnn_dropout: f64,
    /// Dropout between recurrent layers (0 disables).
    pub lstm_dropout: f64,
    /// Whether convolution branches use batch normalization.
    pub batchnorm: bool,
    /// Attention heads; the architecture fixes this at 8.
    pub heads: usize,
    /// Input window length in days.
    pub window: usize,
    /// Input feature count.
    pub n_features: usize,
    /// Forecast horizon in days.
    pub horizon: usize,
    /// Number of training domains (subjects) for the domain head.
    pub n_domains: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> ModelResult<()> {
        let mut violations = Vec::new();
        if !(self.conv_layers == 1 || self.conv_layers == 2) {
            violations.push(format!("conv_layers must be 1 or 2, got {}", self.conv_layers));
        }
        if ![16, 32, 64].contains(&self.cnn_hidden) {
            violations.push(format!(
                "cnn_hidden must be one of 16/32/64, got {}",
                self.cnn_hidden
            ));
        }
        if !(1..=3).contains(&self.lstm_layers) {
            violations.push(format!(
                "lstm_layers must be 1, 2, or 3, got {}",
                self.lstm_layers
            ));
        }
        if ![64, 128, 256].contains(&self.lstm_hidden) {
            violations.push(format!(
                "lstm_hidden must be one of 64/128/256, got {}",
                self.lstm_hidden
            ));
        }
        for (name, rate) in [
            ("cnn_dropout", self.cnn_dropout),
            ("lstm_dropout", self.lstm_dropout),
        ] {
            // 0 means "off"; otherwise the searched range applies.
            if rate != 0.0 && !(0.1..=0.5).contains(&rate) {
                violations.push(format!("{name} must be 0 or within [0.1, 0.5], got {rate}"));
            }
        }
        if self.heads != N_HEADS {
            violations.push(format!("heads is fixed at {N_HEADS}, got {}", self.heads));
        }
        if self.heads != 0 && !self.lstm_hidden.is_multiple_of(self.heads) {
            violations.push(format!(
                "lstm_hidden {} must divide evenly into {} heads",
                self.lstm_hidden, self.heads
            ));
        }
        if self.window == 0 {
            violations.push("window must be at least 1".into());
        }
        if self.n_features == 0 {
            violations.push("n_features must be at least 1".into());
        }
        if self.horizon == 0 {
            violations.push("horizon must be at least 1".into());
        }
        if self.n_domains == 0 {
            violations.push("n_domains must be at least 1".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(violations))
        }
    }

    /// Channels after concatenating the four branches.
    pub fn fused_channels(&self) -> usize {
        4 * self.cnn_hidden
    }

    /// Sequence width out of the bidirectional stack.
    pub fn seq_width(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// A conservative default inside the search space.
    pub fn default_for(window: usize, n_features: usize, horizon: usize, n_domains: usize) -> Self {
        Self {
            conv_layers: 1,
            cnn_hidden: 16,
            lstm_layers: 1,
            lstm_hidden: 64,
            cnn_dropout: 0.2,
            lstm_dropout: 0.2,
            batchnorm: true,
            heads: N_HEADS,
            window,
            n_features,
            horizon,
            n_domains,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default_for(7, 15, 1, 14).validate().unwrap();
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let mut cfg = ModelConfig::default_for(7, 15, 1, 14);
        cfg.lstm_hidden = 100;
        cfg.cnn_hidden = 20;
        cfg.cnn_dropout = 0.7;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lstm_hidden"), "{msg}");
        assert!(msg.contains("cnn_hidden"), "{msg}");
        assert!(msg.contains("cnn_dropout"), "{msg}");
    }

    #[test]
    fn zero_dropout_is_allowed() {
        let mut cfg = ModelConfig::default_for(5, 4, 2, 3);
        cfg.cnn_dropout = 0.0;
        cfg.lstm_dropout = 0.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = ModelConfig::default_for(7, 15, 3, 14);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}

//! Two-stage adaptation around the forecasting network.
//!
//! Stage one trains on the pooled training subjects with an optional
//! adversarial domain term so the learned representation stops encoding who
//! the data came from. Stage two adapts the trained network to one unseen
//! subject using only that subject's unlabeled inputs. Final inference runs
//! the (possibly adapted) network in eval mode. Four operating modes toggle
//! the two stages independently.

mod train;
mod tta;

pub use train::{combined_loss, train_phase1, Phase1Outcome};
pub use tta::{
    pairwise_consistency_loss, temporal_smoothness_loss, tta_consistency, tta_entropy,
    tta_temporal, TtaHistory, UnlabeledWindows,
};

use crate::model::ModelError;
use crate::preprocess::window::WindowSet;
use crate::tensor::{ArrayD, BoundParams, Element, Graph, TensorError};
use serde::{Deserialize, Serialize};

/// Errors from training, adaptation, or dispatch.
#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type AdaptResult<T> = Result<T, AdaptError>;

/// Which adaptation stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Neither stage: plain supervised training, plain inference.
    None,
    /// Adversarial domain term during training only.
    TrainOnly,
    /// Unlabeled adaptation on the test subject only.
    TestOnly,
    /// Both stages.
    Both,
}

impl AdaptMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptMode::None => "none",
            AdaptMode::TrainOnly => "train-only",
            AdaptMode::TestOnly => "test-only",
            AdaptMode::Both => "both",
        }
    }

    /// Does stage one apply the adversarial domain term?
    pub fn adversarial_training(&self) -> bool {
        matches!(self, AdaptMode::TrainOnly | AdaptMode::Both)
    }

    /// Does stage two run on the test subject?
    pub fn test_time_adaptation(&self) -> bool {
        matches!(self, AdaptMode::TestOnly | AdaptMode::Both)
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AdaptMode::None),
            "train-only" => Ok(AdaptMode::TrainOnly),
            "test-only" => Ok(AdaptMode::TestOnly),
            "both" => Ok(AdaptMode::Both),
            other => Err(format!(
                "unknown mode '{other}' (expected none, train-only, test-only, both)"
            )),
        }
    }
}

/// Unlabeled-adaptation objective for stage two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMethod {
    /// Agreement between clean and noise-augmented predictions.
    Consistency,
    /// Pseudo-labels from confident (noise-stable) predictions.
    Entropy,
    /// Smoothness of predictions across sliding window positions.
    Temporal,
}

impl TtaMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TtaMethod::Consistency => "consistency",
            TtaMethod::Entropy => "entropy",
            TtaMethod::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for TtaMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consistency" => Ok(TtaMethod::Consistency),
            "entropy" => Ok(TtaMethod::Entropy),
            "temporal" => Ok(TtaMethod::Temporal),
            other => Err(format!(
                "unknown tta method '{other}' (expected consistency, entropy, temporal)"
            )),
        }
    }
}

/// Form of the supervised fit term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MainLoss {
    /// Mean squared error (default; smoother gradients, same argmin).
    Mse,
    /// Root mean squared error.
    Rmse,
}

impl std::str::FromStr for MainLoss {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(MainLoss::Mse),
            "rmse" => Ok(MainLoss::Rmse),
            other => Err(format!("unknown main loss '{other}' (expected mse, rmse)")),
        }
    }
}

/// Legal mini-batch sizes.
pub const BATCH_SIZES: [usize; 3] = [8, 16, 32];

/// Everything the two stages need beyond the architecture itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Weight on the domain term in stage one; forced to zero when the mode
    /// disables adversarial training.
    pub alpha: f64,
    /// Stage-one learning rate.
    pub lr: f64,
    /// Stage-two learning rate.
    pub lr_tta: f64,
    /// Stage-two epochs (default 10; 20 is the documented alternative).
    pub tta_epochs: usize,
    pub tta_method: TtaMethod,
    /// Standard deviations of the two input perturbations, on the
    /// normalized feature scale.
    pub noise_levels: (f64, f64),
    /// Minimum noise-stability confidence for a pseudo-label.
    pub confidence_threshold: f64,
    /// Epochs without sufficient smoothed-validation improvement tolerated
    /// before stopping.
    pub patience: usize,
    /// Smallest smoothed-validation improvement that counts.
    pub min_delta: f64,
    /// Weight of the newest raw value in the validation smoother.
    pub smoothing_beta: f64,
    /// Hard cap on stage-one epochs.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub main_loss: MainLoss,
    pub seed: u64,
}

impl AdaptConfig {
    /// Defaults for everything except the run seed.
    pub fn default_with_seed(seed: u64) -> Self {
        AdaptConfig {
            mode: AdaptMode::None,
            alpha: 1.0,
            lr: 1e-3,
            lr_tta: 1e-4,
            tta_epochs: 10,
            tta_method: TtaMethod::Consistency,
            noise_levels: (0.01, 0.02),
            confidence_threshold: 0.9,
            patience: 30,
            min_delta: 1e-4,
            smoothing_beta: 0.1,
            max_epochs: 200,
            batch_size: 8,
            main_loss: MainLoss::Mse,
            seed,
        }
    }

    /// Check every field, reporting all violations at once.
    pub fn validate(&self) -> AdaptResult<()> {
        let mut violations = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            violations.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [("lr", self.lr), ("lr_tta", self.lr_tta)] {
            if !(v > 0.0 && v.is_finite()) {
                violations.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("noise level 1", self.noise_levels.0),
            ("noise level 2", self.noise_levels.1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                violations.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold.is_finite()) {
            violations.push(format!(
                "confidence threshold must be positive, got {}",
                self.confidence_threshold
            ));
        }
        if self.patience == 0 {
            violations.push("patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            violations.push(format!(
                "min_delta must be nonnegative, got {}",
                self.min_delta
            ));
        }
        if !(self.smoothing_beta > 0.0 && self.smoothing_beta <= 1.0) {
            violations.push(format!(
                "smoothing_beta must lie in (0, 1], got {}",
                self.smoothing_beta
            ));
        }
        if self.max_epochs == 0 {
            violations.push("max_epochs must be at least 1".into());
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            violations.push(format!(
                "batch_size must be one of {BATCH_SIZES:?}, got {}",
                self.batch_size
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(AdaptError::Config(violations))
        }
    }

    /// Domain weight stage one actually uses: the configured weight when the
    /// mode trains adversarially, zero otherwise.
    pub fn effective_alpha(&self) -> f64 {
        if self.mode.adversarial_training() {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Exponentially smoothed validation tracker with patience.
///
/// The smoothed series follows `s_0 = v_0`, `s_t = beta * v_t +
/// (1 - beta) * s_{t-1}`. An epoch improves when its smoothed value beats
/// the best seen so far by at least `min_delta`; after `patience`
/// consecutive non-improving epochs the run should stop.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    beta: f64,
    min_delta: f64,
    patience: usize,
    smoothed: Option<f64>,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(beta: f64, min_delta: f64, patience: usize) -> Self {
        EarlyStopper {
            beta,
            min_delta,
            patience,
            smoothed: None,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            epoch: 0,
        }
    }

    /// Feed one raw validation value; returns `(smoothed value, is new
    /// best, should stop now)`.
    pub fn observe(&mut self, raw: f64) -> (f64, bool, bool) {
        let s = match self.smoothed {
            None => raw,
            Some(prev) => self.beta * raw + (1.0 - self.beta) * prev,
        };
        self.smoothed = Some(s);
        let improved = s <= self.best - self.min_delta;
        if improved {
            self.best = s;
            self.best_epoch = self.epoch;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.epoch += 1;
        (s, improved, self.since_improvement >= self.patience)
    }

    /// Index of the epoch with the best smoothed value so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Best smoothed value so far.
    pub fn best_value(&self) -> f64 {
        self.best
    }
}

/// Per-epoch record of a stage-one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Raw validation loss after each epoch, on the normalized scale.
    pub val_raw: Vec<f64>,
    /// Smoothed validation loss, same length as `val_raw`.
    pub val_smoothed: Vec<f64>,
    /// Number of epochs that actually ran.
    pub stop_epoch: usize,
    /// Epoch whose parameters were restored (best smoothed validation).
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Internal-consistency check: series lengths agree, the stop epoch
    /// covers the series, and the best epoch's smoothed validation loss is
    /// within `min_delta` of the smoothed minimum (the stopper only moves
    /// its best mark on improvements of at least `min_delta`, so the mark
    /// can trail the true minimum by strictly less than that).
    pub fn check(&self, max_epochs: usize, min_delta: f64) -> Result<(), String> {
        if self.val_raw.len() != self.val_smoothed.len() {
            return Err(format!(
                "raw and smoothed series lengths differ: {} vs {}",
                self.val_raw.len(),
                self.val_smoothed.len()
            ));
        }
        if self.train_loss.len() != self.val_raw.len() {
            return Err(format!(
                "train and validation series lengths differ: {} vs {}",
                self.train_loss.len(),
                self.val_raw.len()
            ));
        }
        if self.stop_epoch != self.train_loss.len() {
            return Err(format!(
                "stop epoch {} does not match recorded epochs {}",
                self.stop_epoch,
                self.train_loss.len()
            ));
        }
        if self.stop_epoch > max_epochs {
            return Err(format!(
                "stop epoch {} exceeds the cap {max_epochs}",
                self.stop_epoch
            ));
        }
        if self.best_epoch >= self.stop_epoch.max(1) {
            return Err(format!(
                "best epoch {} out of range for {} epochs",
                self.best_epoch, self.stop_epoch
            ));
        }
        let min = self
            .val_smoothed
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !self.val_smoothed.is_empty() && self.val_smoothed[self.best_epoch] > min + min_delta {
            return Err(format!(
                "best epoch {} has smoothed loss {} but the minimum is {min}",
                self.best_epoch, self.val_smoothed[self.best_epoch]
            ));
        }
        Ok(())
    }
}

use crate::model::{forward, init_model, ForwardOptions, ModelParams};
use crate::rng::rng_from;

/// Everything a finished per-fold run produces.
#[derive(Debug)]
pub struct ModeRun<E: Element> {
    /// Final network: stage-one weights, further adapted when stage two ran.
    pub model: ModelParams<E>,
    pub history: TrainHistory,
    /// Stage-two record when the mode ran it.
    pub tta: Option<TtaHistory>,
    /// Eval-mode forecasts for the test windows, shape `[n_windows, horizon]`.
    pub predictions: ArrayD<E>,
    pub warnings: Vec<String>,
}

/// Eval-mode forecasts for a batch of window inputs, `[N, w, F]` packed.
pub fn predict_batch<E: Element>(
    model: &ModelParams<E>,
    x: &ArrayD<E>,
) -> AdaptResult<ArrayD<E>> {
    let mut graph: Graph<E> = Graph::new();
    let bound = BoundParams::bind(&mut graph, &model.set);
    let leaf = graph.leaf_owned(x.clone(), false);
    let mut rng = rng_from(0, 0); // inference consumes no randomness
    let out = forward(
        &mut graph,
        &bound,
        model,
        &leaf,
        &ForwardOptions::inference(),
        &mut rng,
    )?;
    let shape = out.yhat.shape().to_vec();
    Ok(ArrayD::from_vec(&shape, graph.value(&out.yhat).to_vec()))
}

/// Run the full three-phase procedure for one prepared fold.
///
/// Stage one always trains (with the domain term active only in
/// adversarial modes); stage two runs the configured unlabeled-adaptation
/// strategy in test-time modes; phase three produces eval-mode forecasts
/// for the test windows. The architecture's domain count is overridden to
/// the number of distinct training domains.
pub fn run_mode<E: Element>(
    arch: &crate::model::ModelConfig,
    train_windows: &WindowSet,
    val_windows: &WindowSet,
    test_windows: &WindowSet,
    cfg: &AdaptConfig,
) -> AdaptResult<ModeRun<E>> {
    cfg.validate()?;
    let mut arch = arch.clone();
    arch.n_domains = train::distinct_domains(train_windows).max(1);
    let model: ModelParams<E> = init_model(&arch, cfg.seed)?;

    let phase1 = train_phase1(model, train_windows, val_windows, cfg)?;
    let mut model = phase1.model;
    let mut warnings = phase1.warnings;

    let tta = if cfg.mode.test_time_adaptation() {
        let inputs = UnlabeledWindows::from_windows(test_windows);
        let (adapted, hist) = match cfg.tta_method {
            TtaMethod::Consistency => tta_consistency(model, &inputs, cfg)?,
            TtaMethod::Entropy => tta_entropy(model, &inputs, cfg)?,
            TtaMethod::Temporal => tta_temporal(model, &inputs, cfg)?,
        };
        model = adapted;
        warnings.extend(hist.warnings.iter().cloned());
        Some(hist)
    } else {
        None
    };

    let inputs = UnlabeledWindows::from_windows(test_windows);
    let predictions = predict_batch(&model, &inputs.packed::<E>())?;

    Ok(ModeRun {
        model,
        history: phase1.history,
        tta,
        predictions,
        warnings,
    })
}

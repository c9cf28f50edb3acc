//! Core library for sleep-quality forecasting from daily wearable features.
//!
//! The pipeline runs per cohort of subjects: synthesize or load daily series,
//! clean and smooth them, select features, window them, train a convolutional
//! recurrent forecaster with subject-adversarial regularization, optionally
//! adapt it at test time, and evaluate under leave-one-subject-out
//! cross-validation with attribution reports.

pub mod adapt;
pub mod dataio;
pub mod featselect;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tensor;

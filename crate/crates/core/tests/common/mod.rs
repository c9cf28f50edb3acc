//! Shared builders for the adaptation test suite: a compact network
//! configuration and a synthetic cohort that carries a spurious
//! identity–outcome correlation which breaks on the held-out subject.

use adaptcast_core::model::ModelConfig;
use adaptcast_core::preprocess::window::{WindowSample, WindowSet};
use adaptcast_core::rng::rng_from;
use adaptcast_core::tensor::ArrayD;
use rand::Rng;

pub const W: usize = 4;
pub const N_FEATURES: usize = 3;

/// Smallest valid architecture, deterministic (dropout off) for fast runs.
pub fn small_arch(horizon: usize, n_domains: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default_for(W, N_FEATURES, horizon, n_domains);
    cfg.cnn_dropout = 0.0;
    cfg.lstm_dropout = 0.0;
    cfg
}

/// Windows for one subject. Targets follow a latent per-window level
/// `base ~ U[0.2, 0.8]` plus the subject's constant outcome calibration
/// `level`. Three features per day:
/// 0 — the task channel: `base` plus daily noise (sd ≈ 0.10), identically
///     distributed for every subject;
/// 1 — a pure uniform distractor;
/// 2 — an identity beacon: `0.5 + beacon` with ±0.02 jitter, where
///     `beacon` is a per-subject constant carrying no task information of
///     its own.
///
/// Whether the beacon helps depends on how `level` relates to it across
/// the cohort — see [`shifted_cohort`] for the trap that relation sets.
/// Window starts are consecutive.
pub fn subject_windows(
    set: &mut WindowSet,
    domain: usize,
    beacon: f64,
    level: f64,
    n_windows: usize,
    horizon: usize,
    seed: u64,
) {
    let mut rng = rng_from(seed, 0x57494E00 ^ domain as u64);
    for k in 0..n_windows {
        let base = rng.random_range(0.2..0.8);
        let mut x = Vec::with_capacity(W * N_FEATURES);
        for _ in 0..W {
            x.push(base + rng.random_range(-0.17..0.17));
            x.push(rng.random_range(0.0..1.0));
            x.push(0.5 + beacon + rng.random_range(-0.02..0.02));
        }
        let mut y = Vec::with_capacity(horizon);
        for j in 0..horizon {
            // Later horizon entries drift slightly so multi-step targets
            // are not duplicates.
            y.push((base + level + 0.05 * j as f64).clamp(0.0, 1.0));
        }
        set.samples.push(WindowSample {
            x: ArrayD::from_vec(&[W, N_FEATURES], x),
            y,
            domain,
            t0: k,
        });
    }
}

/// Beacon values for the training subjects: two clusters at ±{0.30,
/// 0.22, …}, symmetric around zero.
pub fn train_offsets(n_subjects: usize) -> Vec<f64> {
    let low = n_subjects.div_ceil(2);
    (0..n_subjects)
        .map(|s| {
            if s < low {
                -0.30 + 0.08 * s as f64
            } else {
                0.30 - 0.08 * (s - low) as f64
            }
        })
        .collect()
}

/// Slope of the spurious beacon→calibration relation across the training
/// subjects.
const SPURIOUS_SLOPE: f64 = 0.6;

pub struct Cohort {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Shift-injected cohort. Every training subject's outcome calibration
/// tracks their identity beacon (`level = 0.6·beacon`), so with few
/// subjects the beacon looks like a precise, trivially learnable route to
/// the calibration — an identity shortcut. The held-out subject breaks
/// the correlation: their beacon sits inside one training cluster
/// (+0.26) while their calibration matches the opposite cluster (−0.18).
/// A fit that follows the beacon misses them by ≈ 0.34; a fit that
/// ignores identity and prices the calibration at its cohort mean (0)
/// misses by only 0.18. All raw inputs stay inside the training range.
pub fn shifted_cohort(
    n_subjects: usize,
    per_subject: usize,
    horizon: usize,
    seed: u64,
) -> Cohort {
    let beacons = train_offsets(n_subjects);
    let mut train = WindowSet::empty(W, horizon, 1);
    let mut val = WindowSet::empty(W, horizon, 1);
    for (s, &b) in beacons.iter().enumerate() {
        let level = SPURIOUS_SLOPE * b;
        subject_windows(&mut train, s, b, level, per_subject, horizon, seed);
        subject_windows(
            &mut val,
            s,
            b,
            level,
            per_subject / 2,
            horizon,
            seed ^ 0x5641,
        );
    }
    let mut test = WindowSet::empty(W, horizon, 1);
    subject_windows(
        &mut test,
        n_subjects,
        0.26,
        -0.18,
        per_subject,
        horizon,
        seed ^ 0xAB,
    );
    Cohort { train, val, test }
}

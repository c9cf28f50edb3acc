//! Cleaning pipeline for raw day-level cohorts.
//!
//! Order is fixed: sentinel target values become missing, anomaly screens
//! flag implausible entries, flagged cells join the missing set, gaps are
//! filled by nearest-neighbor imputation, and finally each channel is
//! smoothed by the filter routed to it.
//!
//! Feature columns are screened and imputed across the whole cohort (the
//! inter-quartile screen pools every subject's values; imputation may borrow
//! from similar days of other subjects). The prediction target is screened
//! and imputed strictly within each subject so that no step ever mixes one
//! subject's outcome values into another subject's records.

pub mod anomaly;
pub mod impute;
pub mod scale;
pub mod smooth;
pub mod window;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Cohort;

pub use anomaly::{detect_anomalies_iqr, detect_anomalies_rolling, quantile_sorted};
pub use impute::impute_knn;
pub use scale::ScalerState;
pub use smooth::{apply_smoother, route_feature, route_target, SmoothMethod};
pub use window::{make_windows, window_count, WindowSample, WindowSet};

/// Column key used for the prediction target in anomaly reports.
pub const TARGET_COLUMN: &str = "sleep_score";

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("imputation failed: {0}")]
    Impute(String),
    #[error("scaling failed: {0}")]
    Scale(String),
    #[error("cleaning failed: {0}")]
    Clean(String),
}

pub type PrepResult<T> = Result<T, PrepError>;

/// Knobs for the cleaning pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanConfig {
    /// Fence multiplier for the inter-quartile screen.
    pub iqr_mult: f64,
    /// Length of the centered rolling-mean window.
    pub roll_window: usize,
    /// Absolute deviation from the rolling mean that flags an entry.
    pub roll_threshold: f64,
    /// Neighbor count for gap imputation.
    pub knn_k: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            iqr_mult: 1.0,
            roll_window: 5,
            roll_threshold: 30.0,
            knn_k: 3,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> PrepResult<()> {
        if !(self.iqr_mult.is_finite() && self.iqr_mult > 0.0) {
            return Err(PrepError::Clean("iqr_mult must be a positive number".into()));
        }
        if self.roll_window < 2 {
            return Err(PrepError::Clean("roll_window must be at least 2".into()));
        }
        if !(self.roll_threshold.is_finite() && self.roll_threshold > 0.0) {
            return Err(PrepError::Clean(
                "roll_threshold must be a positive number".into(),
            ));
        }
        if self.knn_k == 0 {
            return Err(PrepError::Clean("knn_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where each anomaly screen fired: column name -> (subject id, day index).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub iqr: BTreeMap<String, Vec<(u32, usize)>>,
    pub rolling: BTreeMap<String, Vec<(u32, usize)>>,
}

impl AnomalyReport {
    pub fn total_flags(&self) -> usize {
        self.iqr.values().map(Vec::len).sum::<usize>()
            + self.rolling.values().map(Vec::len).sum::<usize>()
    }

    fn record(map: &mut BTreeMap<String, Vec<(u32, usize)>>, key: &str, hit: (u32, usize)) {
        map.entry(key.to_string()).or_default().push(hit);
    }

    fn sort(&mut self) {
        for v in self.iqr.values_mut() {
            v.sort_unstable();
        }
        for v in self.rolling.values_mut() {
            v.sort_unstable();
        }
    }
}

/// Result of [`clean_cohort`]: the cleaned data, where the screens fired,
/// and any non-fatal notes accumulated along the way.
#[derive(Debug, Clone)]
pub struct CleanOutcome {
    pub cohort: Cohort,
    pub report: AnomalyReport,
    pub warnings: Vec<String>,
}

/// Convert sentinel target values (0 or -1, used by exporters for "no
/// reading") into explicit missing entries. Returns how many were converted.
pub fn mark_missing(cohort: &mut Cohort) -> usize {
    let mut converted = 0;
    for subject in &mut cohort.subjects {
        for t in 0..subject.n_days() {
            let v = subject.target[t];
            if v == 0.0 || v == -1.0 {
                subject.target[t] = f64::NAN;
                subject.set_target_missing(t, true);
                converted += 1;
            }
        }
    }
    converted
}

/// Normalized within-series position of day `t` out of `t_len` days.
fn day_position(t: usize, t_len: usize) -> f64 {
    if t_len <= 1 {
        0.0
    } else {
        t as f64 / (t_len - 1) as f64
    }
}

/// Run the full cleaning pipeline on a cohort.
pub fn clean_cohort(cohort: &Cohort, cfg: &CleanConfig) -> PrepResult<CleanOutcome> {
    cfg.validate()?;
    let mut cohort = cohort.clone();
    let mut warnings = Vec::new();
    let mut report = AnomalyReport::default();
    let n_feat = cohort.n_features();
    let feature_names = cohort.feature_names.clone();

    mark_missing(&mut cohort);

    // Per-subject flag sets: (day, column) with column n_feat meaning target.
    let mut flags: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); cohort.n_subjects()];

    // Inter-quartile screen on features pools the whole cohort per column so
    // a subject-wide shift is not mistaken for a run of outliers.
    for (c, name) in feature_names.iter().enumerate() {
        let mut pooled = Vec::new();
        let mut origin = Vec::new();
        for (si, subject) in cohort.subjects.iter().enumerate() {
            for t in 0..subject.n_days() {
                pooled.push(subject.feature(t, c));
                origin.push((si, t));
            }
        }
        let mut local = Vec::new();
        for idx in detect_anomalies_iqr(&pooled, cfg.iqr_mult, &mut local) {
            let (si, t) = origin[idx];
            flags[si].insert((t, c));
            AnomalyReport::record(&mut report.iqr, name, (cohort.subjects[si].subject_id, t));
        }
        warnings.extend(local.into_iter().map(|w| format!("feature {name}: {w}")));
    }

    // Rolling screen is inherently per-series for features as well.
    for (si, subject) in cohort.subjects.iter().enumerate() {
        for (c, name) in feature_names.iter().enumerate() {
            let column: Vec<f64> = (0..subject.n_days()).map(|t| subject.feature(t, c)).collect();
            for t in detect_anomalies_rolling(&column, cfg.roll_window, cfg.roll_threshold) {
                flags[si].insert((t, c));
                AnomalyReport::record(&mut report.rolling, name, (subject.subject_id, t));
            }
        }
    }

    // Target screens stay within each subject: the outcome scale is personal
    // and pooling it would let one subject's values shape another's record.
    for (si, subject) in cohort.subjects.iter().enumerate() {
        let mut local = Vec::new();
        for t in detect_anomalies_iqr(&subject.target, cfg.iqr_mult, &mut local) {
            flags[si].insert((t, n_feat));
            AnomalyReport::record(&mut report.iqr, TARGET_COLUMN, (subject.subject_id, t));
        }
        warnings.extend(
            local
                .into_iter()
                .map(|w| format!("subject {} {TARGET_COLUMN}: {w}", subject.subject_id)),
        );
        for t in detect_anomalies_rolling(&subject.target, cfg.roll_window, cfg.roll_threshold) {
            flags[si].insert((t, n_feat));
            AnomalyReport::record(&mut report.rolling, TARGET_COLUMN, (subject.subject_id, t));
        }
    }
    report.sort();

    // Flagged cells become missing before imputation.
    for (si, subject) in cohort.subjects.iter_mut().enumerate() {
        for &(t, c) in &flags[si] {
            if c < n_feat {
                subject.set_feature(t, c, f64::NAN);
                subject.set_feature_missing(t, c, true);
            } else {
                subject.target[t] = f64::NAN;
                subject.set_target_missing(t, true);
            }
        }
    }

    impute_features_pooled(&mut cohort, cfg.knn_k, &feature_names)?;
    impute_target_per_subject(&mut cohort, cfg.knn_k)?;

    // Smooth each completed channel with its routed filter.
    for subject in &mut cohort.subjects {
        let t_len = subject.n_days();
        for (c, name) in feature_names.iter().enumerate() {
            let column: Vec<f64> = (0..t_len).map(|t| subject.feature(t, c)).collect();
            let smoothed = apply_smoother(route_feature(name), &column);
            for (t, v) in smoothed.into_iter().enumerate() {
                subject.set_feature(t, c, v);
            }
        }
        subject.target = apply_smoother(route_target(), &subject.target);
    }

    for subject in &cohort.subjects {
        debug_assert!(
            subject.features.data().iter().all(|v| v.is_finite())
                && subject.target.iter().all(|v| v.is_finite()),
            "cleaning left non-finite values"
        );
    }

    Ok(CleanOutcome {
        cohort,
        report,
        warnings,
    })
}

/// Impute feature gaps over a pooled matrix of every subject-day row. The
/// target column is deliberately absent so outcome values can never steer
/// which rows look similar; a normalized day-position column is appended so
/// neighbors prefer comparable phases of each series.
fn impute_features_pooled(
    cohort: &mut Cohort,
    k: usize,
    feature_names: &[String],
) -> PrepResult<()> {
    let n_feat = cohort.n_features();
    let cols = n_feat + 1;
    let mut rows_origin = Vec::new();
    let mut matrix = Vec::new();
    for (si, subject) in cohort.subjects.iter().enumerate() {
        let t_len = subject.n_days();
        for t in 0..t_len {
            for c in 0..n_feat {
                matrix.push(subject.feature(t, c));
            }
            matrix.push(day_position(t, t_len));
            rows_origin.push((si, t));
        }
    }
    let n_rows = rows_origin.len();
    if n_rows == 0 {
        return Ok(());
    }
    impute_knn(&mut matrix, n_rows, cols, k).map_err(|e| match e {
        PrepError::Impute(msg) => {
            // Translate bare column indices into feature names for callers.
            let named = feature_names
                .iter()
                .enumerate()
                .fold(msg, |m, (c, name)| {
                    m.replace(&format!("column {c} "), &format!("feature {name} "))
                });
            PrepError::Impute(named)
        }
        other => other,
    })?;
    for (row, &(si, t)) in rows_origin.iter().enumerate() {
        let subject = &mut cohort.subjects[si];
        for c in 0..n_feat {
            if !subject.feature(t, c).is_finite() {
                subject.set_feature(t, c, matrix[row * cols + c]);
            }
        }
    }
    Ok(())
}

/// Impute target gaps within each subject from the nearest observed days of
/// that same subject (distance over the target value and day position).
fn impute_target_per_subject(cohort: &mut Cohort, k: usize) -> PrepResult<()> {
    for subject in &mut cohort.subjects {
        let t_len = subject.n_days();
        if subject.target.iter().all(|v| v.is_finite()) {
            continue;
        }
        let mut matrix = Vec::with_capacity(t_len * 2);
        for t in 0..t_len {
            matrix.push(subject.target[t]);
            matrix.push(day_position(t, t_len));
        }
        impute_knn(&mut matrix, t_len, 2, k).map_err(|e| {
            PrepError::Impute(format!(
                "subject {} {TARGET_COLUMN}: {e}",
                subject.subject_id
            ))
        })?;
        for t in 0..t_len {
            if !subject.target[t].is_finite() {
                subject.target[t] = matrix[t * 2];
            }
        }
    }
    Ok(())
}

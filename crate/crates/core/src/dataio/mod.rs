//! Cohort data model: per-subject daily series, CSV ingestion, seeded
//! synthetic cohorts with controlled inter-subject shift, and
//! leave-one-subject-out fold construction.

mod load;
mod synth;

pub use load::{load_cohort, save_cohort};
pub use synth::{
    generate_cohort, generate_cohort_with_log, generate_driven_cohort, GenLog, SynthSpec,
};

use crate::tensor::ArrayD;
use std::collections::BTreeSet;
use thiserror::Error;

/// Feature acronyms of the daily wearable export, in canonical column order.
/// The stress-average column sits between the respiration block and the sleep
/// block; the final CSV column (the sleep score) is the target, not a feature.
pub const CANONICAL_FEATURES: [&str; 23] = [
    "TK", "TS", "TD", "HA", "AS", "MI", "RH", "MH", "XH", "AWR", "HRV", "LRV", "SA", "DS", "LS",
    "RS", "AW", "AC", "SS", "RM", "LR", "HR", "AR",
];

/// Canonical names when the width matches the wearable export, generic
/// `F00..` names otherwise.
pub fn feature_names_for(n_features: usize) -> Vec<String> {
    if n_features == CANONICAL_FEATURES.len() {
        CANONICAL_FEATURES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_features).map(|i| format!("F{i:02}")).collect()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type DataResult<T> = Result<T, DataError>;

/// One subject's daily series. `features` is `[T, F]`; missing entries hold
/// NaN and are flagged in `missing_mask`, whose `F+1`-th column covers the
/// target.
#[derive(Clone, Debug)]
pub struct SubjectSeries {
    pub subject_id: u32,
    pub days: Vec<i64>,
    pub features: ArrayD<f64>,
    pub target: Vec<f64>,
    pub missing_mask: Vec<bool>,
}

impl SubjectSeries {
    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_features(&self) -> usize {
        if self.features.shape().len() == 2 {
            self.features.shape()[1]
        } else {
            0
        }
    }

    pub fn feature(&self, t: usize, f: usize) -> f64 {
        self.features.data()[t * self.n_features() + f]
    }

    pub fn set_feature(&mut self, t: usize, f: usize, v: f64) {
        let nf = self.n_features();
        self.features.data_mut()[t * nf + f] = v;
    }

    /// Mask accessors; column `F` is the target column.
    pub fn feature_missing(&self, t: usize, f: usize) -> bool {
        self.missing_mask[t * (self.n_features() + 1) + f]
    }

    pub fn target_missing(&self, t: usize) -> bool {
        let nf = self.n_features();
        self.missing_mask[t * (nf + 1) + nf]
    }

    pub fn set_feature_missing(&mut self, t: usize, f: usize, missing: bool) {
        let nf = self.n_features();
        self.missing_mask[t * (nf + 1) + f] = missing;
    }

    pub fn set_target_missing(&mut self, t: usize, missing: bool) {
        let nf = self.n_features();
        self.missing_mask[t * (nf + 1) + nf] = missing;
    }

    /// Masked entries may hold NaN, so equality is bitwise per value.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.subject_id == other.subject_id
            && self.days == other.days
            && self.features.shape() == other.features.shape()
            && self
                .features
                .data()
                .iter()
                .zip(other.features.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .target
                .iter()
                .zip(other.target.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.missing_mask == other.missing_mask
    }

    fn check_invariants(&self) -> DataResult<()> {
        let t = self.n_days();
        let f = self.n_features();
        if t == 0 {
            return Err(DataError::Integrity(format!(
                "subject {} has no rows",
                self.subject_id
            )));
        }
        if self.features.shape() != [t, f]
            || self.target.len() != t
            || self.missing_mask.len() != t * (f + 1)
        {
            return Err(DataError::Integrity(format!(
                "subject {} has inconsistent array sizes",
                self.subject_id
            )));
        }
        if self.days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Integrity(format!(
                "subject {} day indices not strictly increasing",
                self.subject_id
            )));
        }
        // A non-finite stored value must be flagged missing.
        for ti in 0..t {
            for fi in 0..f {
                if !self.feature(ti, fi).is_finite() && !self.feature_missing(ti, fi) {
                    return Err(DataError::Integrity(format!(
                        "subject {} has unmasked non-finite feature at day index {ti}",
                        self.subject_id
                    )));
                }
            }
            if !self.target[ti].is_finite() && !self.target_missing(ti) {
                return Err(DataError::Integrity(format!(
                    "subject {} has unmasked non-finite target at day index {ti}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// A set of subjects sharing one feature schema.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub subjects: Vec<SubjectSeries>,
    pub feature_names: Vec<String>,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectSeries>, feature_names: Vec<String>) -> DataResult<Self> {
        let cohort = Cohort {
            subjects,
            feature_names,
        };
        cohort.check_invariants()?;
        Ok(cohort)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectSeries> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.feature_names == other.feature_names
            && self.subjects.len() == other.subjects.len()
            && self
                .subjects
                .iter()
                .zip(other.subjects.iter())
                .all(|(a, b)| a.bitwise_eq(b))
    }

    fn check_invariants(&self) -> DataResult<()> {
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.subject_id) {
                return Err(DataError::Integrity(format!(
                    "duplicate subject id {}",
                    s.subject_id
                )));
            }
            if s.n_features() != self.feature_names.len() {
                return Err(DataError::Integrity(format!(
                    "subject {} has {} features, schema has {}",
                    s.subject_id,
                    s.n_features(),
                    self.feature_names.len()
                )));
            }
            s.check_invariants()?;
        }
        Ok(())
    }

    /// Drop the first and last recorded day of every subject (device
    /// warm-up/removal rows). Errors if any subject would be left empty.
    pub fn trim_ends(&self) -> DataResult<Cohort> {
        let mut subjects = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            let t = s.n_days();
            if t <= 2 {
                return Err(DataError::Config(format!(
                    "subject {} has only {t} day(s); trimming first/last would leave none",
                    s.subject_id
                )));
            }
            let f = s.n_features();
            let keep = t - 2;
            let mut features = vec![0.0; keep * f];
            features.copy_from_slice(&s.features.data()[f..(t - 1) * f]);
            subjects.push(SubjectSeries {
                subject_id: s.subject_id,
                days: s.days[1..t - 1].to_vec(),
                features: ArrayD::from_vec(&[keep, f], features),
                target: s.target[1..t - 1].to_vec(),
                missing_mask: s.missing_mask[(f + 1)..(t - 1) * (f + 1)].to_vec(),
            });
        }
        Cohort::new(subjects, self.feature_names.clone())
    }
}

/// Subject-level split for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub train_ids: BTreeSet<u32>,
    pub val_id: u32,
    pub test_id: u32,
}

/// Validation-subject policy for fold construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValPolicy {
    /// The subject after the test subject, in ascending id order, cyclically.
    NextSubject,
    /// Always this subject; folds where it is the test subject fall back to
    /// the next-subject rule.
    FixedId(u32),
}

/// One fold per subject as test; N-2 subjects train.
pub fn make_folds(cohort: &Cohort, policy: ValPolicy) -> DataResult<Vec<FoldSplit>> {
    let mut ids = cohort.subject_ids();
    ids.sort_unstable();
    if ids.len() < 3 {
        return Err(DataError::Config(format!(
            "cross-validation needs at least 3 subjects, got {}",
            ids.len()
        )));
    }
    if let ValPolicy::FixedId(v) = policy {
        if !ids.contains(&v) {
            return Err(DataError::Config(format!(
                "fixed validation subject {v} not in cohort"
            )));
        }
    }
    let next_of = |id: u32| -> u32 {
        let pos = ids.iter().position(|&x| x == id).unwrap();
        ids[(pos + 1) % ids.len()]
    };
    let mut folds = Vec::with_capacity(ids.len());
    for &test in &ids {
        let val = match policy {
            ValPolicy::NextSubject => next_of(test),
            ValPolicy::FixedId(v) if v != test => v,
            ValPolicy::FixedId(v) => next_of(v),
        };
        let train_ids: BTreeSet<u32> = ids
            .iter()
            .copied()
            .filter(|&id| id != test && id != val)
            .collect();
        folds.push(FoldSplit {
            train_ids,
            val_id: val,
            test_id: test,
        });
    }
    Ok(folds)
}

//! CSV ingestion and export.
//!
//! One row per (subject, day): `subject_id,day,<features...>,sleep_score`.
//! Empty cells mean missing; they load as NaN with the mask set.

use super::{Cohort, DataError, DataResult, SubjectSeries};
use crate::tensor::ArrayD;
use std::collections::BTreeMap;
use std::path::Path;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                io_err(path, io)
            } else {
                unreachable!()
            }
        }
        _ => DataError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        },
    }
}

struct Row {
    features: Vec<f64>,
    target: f64,
    mask: Vec<bool>,
}

/// Load a cohort whose header must match `schema` (case-insensitive) between
/// the fixed `subject_id,day` prefix and `sleep_score` suffix. Rows may
/// arrive in any order; they are sorted by day within each subject.
pub fn load_cohort<P: AsRef<Path>>(path: P, schema: &[String]) -> DataResult<Cohort> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;

    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected_len = schema.len() + 3;
    if headers.len() != expected_len {
        return Err(DataError::Schema(format!(
            "expected {expected_len} columns (subject_id, day, {} features, sleep_score), got {}",
            schema.len(),
            headers.len()
        )));
    }
    let norm = |s: &str| s.trim().to_ascii_lowercase();
    if norm(&headers[0]) != "subject_id" || norm(&headers[1]) != "day" {
        return Err(DataError::Schema(format!(
            "header must start with 'subject_id,day', got '{},{}'",
            &headers[0], &headers[1]
        )));
    }
    if norm(&headers[expected_len - 1]) != "sleep_score" {
        return Err(DataError::Schema(format!(
            "last column must be 'sleep_score', got '{}'",
            &headers[expected_len - 1]
        )));
    }
    for (i, name) in schema.iter().enumerate() {
        if norm(&headers[i + 2]) != norm(name) {
            return Err(DataError::Schema(format!(
                "unknown column '{}' at position {}, expected '{name}'",
                &headers[i + 2],
                i + 2
            )));
        }
    }

    let nf = schema.len();
    let mut per_subject: BTreeMap<u32, BTreeMap<i64, Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != expected_len {
            return Err(DataError::Parse {
                line,
                msg: format!("expected {expected_len} fields, got {}", record.len()),
            });
        }
        let subject_id: u32 = record[0].parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("bad subject_id '{}'", &record[0]),
        })?;
        let day: i64 = record[1].parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("bad day '{}'", &record[1]),
        })?;
        let mut features = Vec::with_capacity(nf);
        let mut mask = Vec::with_capacity(nf + 1);
        for i in 0..nf {
            let cell = &record[i + 2];
            if cell.is_empty() {
                features.push(f64::NAN);
                mask.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    line,
                    msg: format!("bad value '{cell}' in column '{}'", schema[i]),
                })?;
                features.push(v);
                mask.push(false);
            }
        }
        let target_cell = &record[expected_len - 1];
        let target = if target_cell.is_empty() {
            mask.push(true);
            f64::NAN
        } else {
            mask.push(false);
            target_cell.parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("bad sleep_score '{target_cell}'"),
            })?
        };
        let rows = per_subject.entry(subject_id).or_default();
        if rows
            .insert(
                day,
                Row {
                    features,
                    target,
                    mask,
                },
            )
            .is_some()
        {
            return Err(DataError::Integrity(format!(
                "duplicate day {day} for subject {subject_id}"
            )));
        }
    }
    if per_subject.is_empty() {
        return Err(DataError::Integrity("no data rows".into()));
    }

    let mut subjects = Vec::with_capacity(per_subject.len());
    for (subject_id, rows) in per_subject {
        let t = rows.len();
        let mut days = Vec::with_capacity(t);
        let mut features = Vec::with_capacity(t * nf);
        let mut target = Vec::with_capacity(t);
        let mut missing_mask = Vec::with_capacity(t * (nf + 1));
        for (day, row) in rows {
            days.push(day);
            features.extend_from_slice(&row.features);
            target.push(row.target);
            missing_mask.extend_from_slice(&row.mask);
        }
        subjects.push(SubjectSeries {
            subject_id,
            days,
            features: ArrayD::from_vec(&[t, nf], features),
            target,
            missing_mask,
        });
    }
    Cohort::new(subjects, schema.to_vec())
}

/// Write a cohort in the same CSV layout `load_cohort` reads; missing values
/// become empty cells.
pub fn save_cohort<P: AsRef<Path>>(cohort: &Cohort, path: P) -> DataResult<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["subject_id".to_string(), "day".to_string()];
    header.extend(cohort.feature_names.iter().cloned());
    header.push("sleep_score".to_string());
    writer.write_record(&header).map_err(|e| csv_err(path, e))?;

    let fmt = |v: f64, missing: bool| {
        if missing {
            String::new()
        } else {
            format!("{v}")
        }
    };
    for s in &cohort.subjects {
        for t in 0..s.n_days() {
            let mut record = vec![s.subject_id.to_string(), s.days[t].to_string()];
            for f in 0..s.n_features() {
                record.push(fmt(s.feature(t, f), s.feature_missing(t, f)));
            }
            record.push(fmt(s.target[t], s.target_missing(t)));
            writer.write_record(&record).map_err(|e| csv_err(path, e))?;
        }
    }
    writer.flush().map_err(|e| io_err(path, e))
}

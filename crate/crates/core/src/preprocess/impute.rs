//! K-nearest-neighbor imputation over a row matrix with NaN gaps.
//!
//! Distances are nan-aware scaled Euclidean: only columns observed in both
//! rows contribute, each scaled by the column's standard deviation, and the
//! squared sum is corrected by `n_cols / n_co_observed` so sparser overlaps
//! are not artificially close. Ties break toward the lower row index, and a
//! missing cell is filled with the unweighted mean of the k nearest rows
//! that observe that column.

use super::PrepError;

/// Column standard deviations over observed entries (population form);
/// zero-variance columns scale by 1 so they still contribute zero distance.
fn column_scales(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>, PrepError> {
    let mut scales = vec![1.0; cols];
    for c in 0..cols {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for r in 0..rows {
            let v = data[r * cols + c];
            if v.is_finite() {
                sum += v;
                sq += v * v;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(PrepError::Impute(format!(
                "column {c} has no observed values"
            )));
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        if var > 0.0 {
            scales[c] = var.sqrt();
        }
    }
    Ok(scales)
}

fn row_distance(a: &[f64], b: &[f64], scales: &[f64]) -> Option<f64> {
    let cols = scales.len();
    let mut sum = 0.0;
    let mut co = 0usize;
    for c in 0..cols {
        if a[c].is_finite() && b[c].is_finite() {
            let d = (a[c] - b[c]) / scales[c];
            sum += d * d;
            co += 1;
        }
    }
    if co == 0 {
        None
    } else {
        Some((sum * cols as f64 / co as f64).sqrt())
    }
}

/// Fill every NaN cell of the row-major `rows x cols` matrix in place.
///
/// Each gap is estimated independently from the original (pre-fill) values,
/// so fill order cannot influence results.
pub fn impute_knn(data: &mut [f64], rows: usize, cols: usize, k: usize) -> Result<(), PrepError> {
    assert_eq!(data.len(), rows * cols);
    if k == 0 {
        return Err(PrepError::Impute("k must be >= 1".into()));
    }
    let scales = column_scales(data, rows, cols)?;
    let original = data.to_vec();

    for r in 0..rows {
        let has_gap = (0..cols).any(|c| !original[r * cols + c].is_finite());
        if !has_gap {
            continue;
        }
        let row = &original[r * cols..(r + 1) * cols];
        // Distances to all other rows, remembered once per gap row.
        let mut neighbors: Vec<(f64, usize)> = Vec::with_capacity(rows - 1);
        for other in 0..rows {
            if other == r {
                continue;
            }
            if let Some(d) = row_distance(row, &original[other * cols..(other + 1) * cols], &scales)
            {
                neighbors.push((d, other));
            }
        }
        neighbors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        for c in 0..cols {
            if original[r * cols + c].is_finite() {
                continue;
            }
            let mut sum = 0.0;
            let mut taken = 0usize;
            for &(_, other) in &neighbors {
                let v = original[other * cols + c];
                if v.is_finite() {
                    sum += v;
                    taken += 1;
                    if taken == k {
                        break;
                    }
                }
            }
            if taken == 0 {
                return Err(PrepError::Impute(format!(
                    "no neighbor observes column {c} for row {r}"
                )));
            }
            data[r * cols + c] = sum / taken as f64;
        }
    }
    Ok(())
}

//! Anomaly detection: a global interquartile-range fence and a per-series
//! rolling-mean deviation test. Both operate on columns where NaN marks an
//! already-missing entry; returned indices refer to the original column.

use std::collections::BTreeSet;

/// Linear-interpolation quantile (the common "type 7" convention) over a
/// sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Indices outside `[Q1 - mult*IQR, Q3 + mult*IQR]`, quartiles over the
/// non-missing entries. Fewer than 4 observed values: detection is skipped
/// (empty set) and a warning is recorded.
pub fn detect_anomalies_iqr(
    column: &[f64],
    mult: f64,
    warnings: &mut Vec<String>,
) -> BTreeSet<usize> {
    let mut observed: Vec<f64> = column.iter().copied().filter(|v| v.is_finite()).collect();
    if observed.len() < 4 {
        warnings.push(format!(
            "iqr detection skipped: only {} observed value(s), need 4",
            observed.len()
        ));
        return BTreeSet::new();
    }
    observed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile_sorted(&observed, 0.25);
    let q3 = quantile_sorted(&observed, 0.75);
    let iqr = q3 - q1;
    let lo = q1 - mult * iqr;
    let hi = q3 + mult * iqr;
    column
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite() && (**v < lo || **v > hi))
        .map(|(i, _)| i)
        .collect()
}

/// Centered rolling mean with partial windows at the edges, skipping missing
/// entries (at least one observation per window since the center itself is
/// observed). Flags entries deviating from their window mean by more than
/// `threshold`.
pub fn detect_anomalies_rolling(
    column: &[f64],
    window: usize,
    threshold: f64,
) -> BTreeSet<usize> {
    debug_assert!(window >= 1);
    let half = window / 2;
    let n = column.len();
    let mut flagged = BTreeSet::new();
    for t in 0..n {
        if !column[t].is_finite() {
            continue;
        }
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let mut sum = 0.0;
        let mut count = 0.0;
        for &v in &column[lo..hi] {
            if v.is_finite() {
                sum += v;
                count += 1.0;
            }
        }
        let mean = sum / count;
        if (column[t] - mean).abs() > threshold {
            flagged.insert(t);
        }
    }
    flagged
}

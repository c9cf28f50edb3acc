//! Min-max scaling fit on training rows only and applied everywhere.
//!
//! Taking the fitted state by reference makes "apply before fit" impossible
//! to express; other splits may legitimately fall outside [0, 1] and are not
//! clamped here (only the model input path clamps).

use serde::{Deserialize, Serialize};

use super::PrepError;

/// Per-column minima and maxima captured from the fitting rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerState {
    /// Fit over row-major `rows x cols` data, ignoring NaN cells.
    pub fn fit(data: &[f64], rows: usize, cols: usize) -> Result<Self, PrepError> {
        assert_eq!(data.len(), rows * cols);
        let mut min = vec![f64::INFINITY; cols];
        let mut max = vec![f64::NEG_INFINITY; cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = data[r * cols + c];
                if v.is_finite() {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        for c in 0..cols {
            if !min[c].is_finite() {
                return Err(PrepError::Scale(format!(
                    "column {c} has no observed values to fit"
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn n_cols(&self) -> usize {
        self.min.len()
    }

    /// Map one value in column `c` to the unit interval of the fitted range.
    /// Degenerate columns (min == max) map to 0.
    pub fn apply_one(&self, c: usize, v: f64) -> f64 {
        let span = self.max[c] - self.min[c];
        if span > 0.0 {
            (v - self.min[c]) / span
        } else {
            0.0
        }
    }

    /// Exact inverse of [`apply_one`](Self::apply_one) for non-degenerate
    /// columns; degenerate columns recover the fitted constant.
    pub fn invert_one(&self, c: usize, v: f64) -> f64 {
        let span = self.max[c] - self.min[c];
        if span > 0.0 {
            v * span + self.min[c]
        } else {
            self.min[c]
        }
    }

    /// Scale a whole row-major matrix in place; NaN passes through.
    pub fn apply(&self, data: &mut [f64], rows: usize) {
        let cols = self.n_cols();
        assert_eq!(data.len(), rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = data[r * cols + c];
                if v.is_finite() {
                    data[r * cols + c] = self.apply_one(c, v);
                }
            }
        }
    }

    /// Invert a whole row-major matrix in place; NaN passes through.
    pub fn invert(&self, data: &mut [f64], rows: usize) {
        let cols = self.n_cols();
        assert_eq!(data.len(), rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = data[r * cols + c];
                if v.is_finite() {
                    data[r * cols + c] = self.invert_one(c, v);
                }
            }
        }
    }
}

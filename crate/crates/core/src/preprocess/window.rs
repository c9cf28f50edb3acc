//! Sliding-window extraction: each sample pairs `w` consecutive days of
//! features with the following `delta` days of target values.

use crate::dataio::SubjectSeries;
use crate::tensor::ArrayD;

/// One training/evaluation sample cut from a subject's day series.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// Input block, shape `[w, n_features]`.
    pub x: ArrayD<f64>,
    /// Forecast targets for the `delta` days after the input block.
    pub y: Vec<f64>,
    /// Dense domain index of the source subject (position in the cohort).
    pub domain: usize,
    /// Offset of the first input day within the subject's series.
    pub t0: usize,
}

/// All samples cut from one or more series with a shared geometry.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub samples: Vec<WindowSample>,
    pub w: usize,
    pub delta: usize,
    pub stride: usize,
}

impl WindowSet {
    pub fn empty(w: usize, delta: usize, stride: usize) -> Self {
        Self {
            samples: Vec::new(),
            w,
            delta,
            stride,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: WindowSet) {
        assert_eq!(self.w, other.w);
        assert_eq!(self.delta, other.delta);
        self.samples.extend(other.samples);
    }
}

/// Number of stride-1 windows a series of length `t_len` yields.
pub fn window_count(t_len: usize, w: usize, delta: usize) -> usize {
    (t_len + 1).saturating_sub(w + delta)
}

/// Cut windows from one subject's series.
///
/// A series shorter than `w + delta` yields an empty set and a warning; the
/// offsets advance by `stride` starting at day 0.
pub fn make_windows(
    series: &SubjectSeries,
    domain: usize,
    w: usize,
    delta: usize,
    stride: usize,
    warnings: &mut Vec<String>,
) -> WindowSet {
    assert!(w >= 1 && delta >= 1 && stride >= 1);
    let t_len = series.n_days();
    let n_feat = series.n_features();
    let mut set = WindowSet::empty(w, delta, stride);
    if t_len < w + delta {
        warnings.push(format!(
            "subject {}: series length {} is shorter than window {} + horizon {}; no samples",
            series.subject_id, t_len, w, delta
        ));
        return set;
    }
    let feats = series.features.data();
    let mut t0 = 0;
    while t0 + w + delta <= t_len {
        let mut x = Vec::with_capacity(w * n_feat);
        x.extend_from_slice(&feats[t0 * n_feat..(t0 + w) * n_feat]);
        let y = series.target[t0 + w..t0 + w + delta].to_vec();
        set.samples.push(WindowSample {
            x: ArrayD::from_vec(&[w, n_feat], x),
            y,
            domain,
            t0,
        });
        t0 += stride;
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t_len: usize, n_feat: usize) -> SubjectSeries {
        let features: Vec<f64> = (0..t_len * n_feat).map(|i| i as f64).collect();
        SubjectSeries {
            subject_id: 7,
            days: (0..t_len as i64).collect(),
            features: ArrayD::from_vec(&[t_len, n_feat], features),
            target: (0..t_len).map(|i| 100.0 + i as f64).collect(),
            missing_mask: vec![false; t_len * (n_feat + 1)],
        }
    }

    #[test]
    fn count_formula_matches_enumeration() {
        for t_len in 0..20 {
            for w in 1..5 {
                for delta in 1..4 {
                    let mut warnings = Vec::new();
                    let set = make_windows(&series(t_len, 2), 0, w, delta, 1, &mut warnings);
                    assert_eq!(set.len(), window_count(t_len, w, delta));
                }
            }
        }
    }

    #[test]
    fn sample_contents_align_with_offsets() {
        let s = series(10, 3);
        let mut warnings = Vec::new();
        let set = make_windows(&s, 4, 3, 2, 1, &mut warnings);
        assert_eq!(set.len(), 6);
        let first = &set.samples[0];
        assert_eq!(first.t0, 0);
        assert_eq!(first.domain, 4);
        assert_eq!(first.x.shape(), &[3, 3]);
        assert_eq!(first.x.data()[0], 0.0);
        assert_eq!(first.x.data()[8], 8.0);
        assert_eq!(first.y, vec![103.0, 104.0]);
        let last = &set.samples[5];
        assert_eq!(last.t0, 5);
        assert_eq!(last.y, vec![108.0, 109.0]);
    }

    #[test]
    fn stride_skips_offsets() {
        let s = series(10, 1);
        let mut warnings = Vec::new();
        let set = make_windows(&s, 0, 3, 1, 2, &mut warnings);
        let offsets: Vec<usize> = set.samples.iter().map(|s| s.t0).collect();
        assert_eq!(offsets, vec![0, 2, 4, 6]);
    }

    #[test]
    fn short_series_warns_and_yields_nothing() {
        let s = series(4, 2);
        let mut warnings = Vec::new();
        let set = make_windows(&s, 0, 4, 1, 1, &mut warnings);
        assert!(set.is_empty());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("subject 7"));
    }
}

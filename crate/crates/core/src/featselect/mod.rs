//! Feature selection: reduce the candidate channel set to the most
//! informative subset by linear correlation, mutual information, recursive
//! elimination over a tree ensemble, or a vote across all three.

pub mod forest;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataio::Cohort;

pub use forest::{fit_forest, ForestModel, ForestParams, Tree, TreeNode};

/// Which selector produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Correlation,
    Mi,
    Rfe,
    Ensemble,
}

impl SelectionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMethod::Correlation => "correlation",
            SelectionMethod::Mi => "mi",
            SelectionMethod::Rfe => "rfe",
            SelectionMethod::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correlation" => Ok(SelectionMethod::Correlation),
            "mi" => Ok(SelectionMethod::Mi),
            "rfe" => Ok(SelectionMethod::Rfe),
            "ensemble" => Ok(SelectionMethod::Ensemble),
            other => Err(format!(
                "unknown selection method '{other}' (expected correlation|mi|rfe|ensemble)"
            )),
        }
    }
}

/// Outcome of one selection run. `selected` is ordered best-first and holds
/// exactly `min(target_k, F)` distinct column indices; `scores` has one
/// entry per input feature (meaning depends on the method: signed Pearson r,
/// mutual information in nats, elimination order, or combined vote key);
/// `votes` is present for the ensemble method only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<u32>>,
}

impl SelectionResult {
    /// Defensive invariant check used by tests and the CLI.
    pub fn check(&self, n_features: usize, target_k: usize) -> Result<(), String> {
        let expect = target_k.min(n_features);
        if self.selected.len() != expect {
            return Err(format!(
                "expected {expect} selected features, got {}",
                self.selected.len()
            ));
        }
        let distinct: BTreeSet<usize> = self.selected.iter().copied().collect();
        if distinct.len() != self.selected.len() {
            return Err("selected indices repeat".into());
        }
        if self.selected.iter().any(|&i| i >= n_features) {
            return Err("selected index out of range".into());
        }
        if self.scores.len() != n_features {
            return Err("scores length mismatch".into());
        }
        if self.scores.iter().any(|v| !v.is_finite()) {
            return Err("non-finite score".into());
        }
        Ok(())
    }
}

/// Day-level design matrix pooled over (optionally a subset of) subjects:
/// one row per subject-day, columns in cohort feature order, target in `y`.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: Vec<f64>,
    pub n: usize,
    pub f: usize,
    pub y: Vec<f64>,
}

pub fn design_matrix(cohort: &Cohort, subset: Option<&BTreeSet<u32>>) -> DesignMatrix {
    let f = cohort.n_features();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for subject in &cohort.subjects {
        if let Some(ids) = subset {
            if !ids.contains(&subject.subject_id) {
                continue;
            }
        }
        for t in 0..subject.n_days() {
            for c in 0..f {
                x.push(subject.feature(t, c));
            }
            y.push(subject.target[t]);
        }
    }
    let n = y.len();
    DesignMatrix { x, n, f, y }
}

/// Rank all features by `score` descending with lower-index tie-break.
fn ranking_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Pearson correlation of each column with `y`; zero-variance columns (or a
/// zero-variance target) score 0.
pub fn pearson_scores(x: &[f64], n: usize, f: usize, y: &[f64]) -> Vec<f64> {
    assert!(n >= 2, "need at least two samples");
    assert_eq!(x.len(), n * f);
    assert_eq!(y.len(), n);
    let ny = n as f64;
    let y_mean = y.iter().sum::<f64>() / ny;
    let y_var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>();
    let mut scores = vec![0.0; f];
    if y_var == 0.0 {
        return scores;
    }
    for c in 0..f {
        let mean = (0..n).map(|r| x[r * f + c]).sum::<f64>() / ny;
        let mut cov = 0.0;
        let mut var = 0.0;
        for r in 0..n {
            let d = x[r * f + c] - mean;
            cov += d * (y[r] - y_mean);
            var += d * d;
        }
        if var > 0.0 {
            scores[c] = cov / (var.sqrt() * y_var.sqrt());
        }
    }
    scores
}

/// Select by absolute Pearson correlation: features whose |r| exceeds
/// `threshold`, back-filled from the ranking (and capped) to `target_k`.
pub fn select_correlation(
    x: &[f64],
    n: usize,
    f: usize,
    y: &[f64],
    threshold: f64,
    target_k: usize,
) -> SelectionResult {
    let scores = pearson_scores(x, n, f, y);
    let abs: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
    let ranked = ranking_desc(&abs);
    let k = target_k.min(f);
    let over: Vec<usize> = ranked
        .iter()
        .copied()
        .filter(|&i| abs[i] > threshold)
        .collect();
    let mut selected: Vec<usize> = over.into_iter().take(k).collect();
    for &i in &ranked {
        if selected.len() == k {
            break;
        }
        if !selected.contains(&i) {
            selected.push(i);
        }
    }
    SelectionResult {
        method: SelectionMethod::Correlation,
        selected,
        scores,
        votes: None,
    }
}

/// Equal-frequency bin labels (0..bins) for one variable: rank order with
/// index tie-break, bin b = floor(rank * bins / n).
fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut labels = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * bins / n;
    }
    labels
}

/// Mutual information in nats between two equal-frequency-binned variables.
pub fn mutual_info_binned(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let n = a.len();
    assert!(n >= bins, "need at least `bins` samples");
    let la = equal_frequency_bins(a, bins);
    let lb = equal_frequency_bins(b, bins);
    let mut joint = vec![0.0f64; bins * bins];
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    for i in 0..n {
        joint[la[i] * bins + lb[i]] += 1.0;
        pa[la[i]] += 1.0;
        pb[lb[i]] += 1.0;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for u in 0..bins {
        for v in 0..bins {
            let p = joint[u * bins + v] / nf;
            if p > 0.0 {
                mi += p * (p / ((pa[u] / nf) * (pb[v] / nf))).ln();
            }
        }
    }
    mi
}

/// Select the `target_k` features with the highest estimated mutual
/// information with the target.
pub fn select_mutual_info(
    x: &[f64],
    n: usize,
    f: usize,
    y: &[f64],
    target_k: usize,
    bins: usize,
) -> SelectionResult {
    assert!(n >= bins, "need at least `bins` samples");
    assert_eq!(x.len(), n * f);
    let mut scores = vec![0.0; f];
    for c in 0..f {
        let column: Vec<f64> = (0..n).map(|r| x[r * f + c]).collect();
        scores[c] = mutual_info_binned(&column, y, bins);
    }
    let ranked = ranking_desc(&scores);
    SelectionResult {
        method: SelectionMethod::Mi,
        selected: ranked.into_iter().take(target_k.min(f)).collect(),
        scores,
        votes: None,
    }
}

/// Recursive feature elimination: refit the forest and drop the feature with
/// the minimum importance (ties drop the higher original index) until
/// `target_k` remain. Scores encode elimination order, later = better;
/// survivors rank above every eliminated feature, ordered by their final
/// importances.
pub fn select_rfe(
    x: &[f64],
    n: usize,
    f: usize,
    y: &[f64],
    target_k: usize,
    params: &ForestParams,
    seed: u64,
    warnings: &mut Vec<String>,
) -> SelectionResult {
    assert_eq!(x.len(), n * f);
    if f <= target_k {
        warnings.push(format!(
            "elimination skipped: {f} feature(s) present, target is {target_k}; keeping all"
        ));
        return SelectionResult {
            method: SelectionMethod::Rfe,
            selected: (0..f).collect(),
            scores: (0..f).map(|i| i as f64).collect(),
            votes: None,
        };
    }
    let mut surviving: Vec<usize> = (0..f).collect();
    let mut scores = vec![0.0; f];
    let mut step = 0usize;
    let mut final_importances = vec![0.0; f];
    while surviving.len() > target_k {
        // Restrict the matrix to the surviving columns.
        let m = surviving.len();
        let mut xs = Vec::with_capacity(n * m);
        for r in 0..n {
            for &c in &surviving {
                xs.push(x[r * f + c]);
            }
        }
        let model = fit_forest(&xs, n, m, y, params, seed.wrapping_add(step as u64));
        // Minimum importance; ties drop the higher original index.
        let mut drop_pos = 0;
        for pos in 1..m {
            let (cur, best) = (
                model.feature_importances[pos],
                model.feature_importances[drop_pos],
            );
            if cur < best || (cur == best && surviving[pos] > surviving[drop_pos]) {
                drop_pos = pos;
            }
        }
        let dropped = surviving.remove(drop_pos);
        scores[dropped] = step as f64;
        step += 1;
        if surviving.len() == target_k {
            // Remember the last fit's importances for ordering survivors.
            let mut kept = model.feature_importances.clone();
            kept.remove(drop_pos);
            for (pos, &c) in surviving.iter().enumerate() {
                final_importances[c] = kept[pos];
            }
        }
    }
    // Survivors ordered by final importance (desc, lower index on ties).
    let mut selected = surviving.clone();
    selected.sort_by(|&a, &b| {
        final_importances[b]
            .partial_cmp(&final_importances[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    // Survivor scores continue the "later = better" scale above all
    // eliminated features.
    for (rank_from_best, &c) in selected.iter().enumerate() {
        scores[c] = (f - 1 - rank_from_best) as f64;
    }
    SelectionResult {
        method: SelectionMethod::Rfe,
        selected,
        scores,
        votes: None,
    }
}

/// One vote per sub-method per selected feature; the `target_k` highest-vote
/// features win, ties broken by mean normalized rank across the three
/// methods, then lower index. The stored score is `votes + (1 - mean rank)`,
/// so sorting scores descending reproduces the selection order.
pub fn select_ensemble(
    x: &[f64],
    n: usize,
    f: usize,
    y: &[f64],
    target_k: usize,
    params: &ForestParams,
    seed: u64,
    warnings: &mut Vec<String>,
) -> SelectionResult {
    let corr = select_correlation(x, n, f, y, 0.05, target_k);
    let mi = select_mutual_info(x, n, f, y, target_k, 8);
    let rfe = select_rfe(x, n, f, y, target_k, params, seed, warnings);

    let mut votes = vec![0u32; f];
    for result in [&corr, &mi, &rfe] {
        for &i in &result.selected {
            votes[i] += 1;
        }
    }
    // Mean normalized rank over each method's full ordering (0 = best).
    let mut mean_rank = vec![0.0; f];
    for result in [&corr, &mi, &rfe] {
        let key: Vec<f64> = match result.method {
            SelectionMethod::Correlation => result.scores.iter().map(|v| v.abs()).collect(),
            _ => result.scores.clone(),
        };
        let order = ranking_desc(&key);
        for (rank, &i) in order.iter().enumerate() {
            mean_rank[i] += if f > 1 {
                rank as f64 / (f - 1) as f64
            } else {
                0.0
            };
        }
    }
    for v in mean_rank.iter_mut() {
        *v /= 3.0;
    }

    let scores: Vec<f64> = (0..f)
        .map(|i| votes[i] as f64 + (1.0 - mean_rank[i]))
        .collect();
    let ranked = ranking_desc(&scores);
    SelectionResult {
        method: SelectionMethod::Ensemble,
        selected: ranked.into_iter().take(target_k.min(f)).collect(),
        scores,
        votes: Some(votes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_xy(n: usize, f: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from(seed, 0xFE57);
        let x: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn perfect_linear_feature_ranks_first() {
        let (x, _) = random_xy(100, 6, 1);
        let y: Vec<f64> = (0..100).map(|r| 2.0 * x[r * 6 + 3]).collect();
        let result = select_correlation(&x, 100, 6, &y, 0.05, 4);
        assert_eq!(result.selected[0], 3);
        assert!((result.scores[3].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_backfills_to_target_k() {
        // Independent noise: few features clear the threshold, but the
        // result still holds exactly target_k.
        let (x, y) = random_xy(5000, 20, 2);
        let result = select_correlation(&x, 5000, 20, &y, 0.05, 15);
        result.check(20, 15).unwrap();
        assert_eq!(result.selected.len(), 15);
    }

    #[test]
    fn zero_variance_feature_scores_zero() {
        let mut x = random_xy(50, 3, 3).0;
        for r in 0..50 {
            x[r * 3 + 1] = 7.0;
        }
        let y: Vec<f64> = (0..50).map(|r| x[r * 3]).collect();
        let result = select_correlation(&x, 50, 3, &y, 0.05, 2);
        assert_eq!(result.scores[1], 0.0);
        assert!(!result.selected.contains(&1));
    }

    #[test]
    fn mutual_info_is_symmetric() {
        let (x, y) = random_xy(500, 4, 4);
        for c in 0..4 {
            let col: Vec<f64> = (0..500).map(|r| x[r * 4 + c]).collect();
            let ab = mutual_info_binned(&col, &y, 8);
            let ba = mutual_info_binned(&y, &col, 8);
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_variables_reach_log_bins() {
        let (x, _) = random_xy(2000, 1, 5);
        let mi = mutual_info_binned(&x, &x, 8);
        assert!((mi - (8.0f64).ln()).abs() < 1e-9, "mi = {mi}");
    }

    #[test]
    fn rfe_at_boundary_returns_identity_with_warning() {
        let (x, y) = random_xy(60, 15, 6);
        let mut warnings = Vec::new();
        let result = select_rfe(
            &x,
            60,
            15,
            &y,
            15,
            &ForestParams {
                n_trees: 5,
                max_depth: 3,
            },
            1,
            &mut warnings,
        );
        assert_eq!(result.selected, (0..15).collect::<Vec<_>>());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn rfe_scores_encode_a_complete_elimination_order() {
        let (x, y) = random_xy(80, 10, 7);
        let mut warnings = Vec::new();
        let p = ForestParams {
            n_trees: 10,
            max_depth: 3,
        };
        let result = select_rfe(&x, 80, 10, &y, 6, &p, 2, &mut warnings);
        result.check(10, 6).unwrap();
        // Scores are a permutation of 0..F: four elimination steps then the
        // six survivors stacked above them.
        let mut sorted = result.scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(sorted, expect);
        // Every survivor outranks every eliminated feature.
        for &s in &result.selected {
            for c in 0..10 {
                if !result.selected.contains(&c) {
                    assert!(result.scores[s] > result.scores[c]);
                }
            }
        }
    }

    #[test]
    fn ensemble_vote_counts_dominate_rank() {
        let (x, y) = random_xy(120, 8, 8);
        let mut warnings = Vec::new();
        let p = ForestParams {
            n_trees: 10,
            max_depth: 3,
        };
        let result = select_ensemble(&x, 120, 8, &y, 4, &p, 3, &mut warnings);
        let votes = result.votes.as_ref().unwrap();
        // Walking the selection order, vote counts never increase.
        for pair in result.selected.windows(2) {
            assert!(votes[pair[0]] >= votes[pair[1]]);
        }
        // And every selected feature has at least as many votes as every
        // unselected one.
        let min_sel = result.selected.iter().map(|&i| votes[i]).min().unwrap();
        for c in 0..8 {
            if !result.selected.contains(&c) {
                assert!(votes[c] <= min_sel);
            }
        }
    }

    #[test]
    fn unanimous_methods_yield_three_votes_each() {
        // With F == target_k every method selects everything.
        let (x, y) = random_xy(60, 5, 9);
        let mut warnings = Vec::new();
        let p = ForestParams {
            n_trees: 5,
            max_depth: 2,
        };
        let result = select_ensemble(&x, 60, 5, &y, 5, &p, 4, &mut warnings);
        assert_eq!(result.votes.as_ref().unwrap(), &vec![3u32; 5]);
        result.check(5, 5).unwrap();
    }

    #[test]
    fn method_tags_round_trip_through_strings() {
        for m in [
            SelectionMethod::Correlation,
            SelectionMethod::Mi,
            SelectionMethod::Rfe,
            SelectionMethod::Ensemble,
        ] {
            let parsed: SelectionMethod = m.as_str().parse().unwrap();
            assert_eq!(parsed, m);
        }
        assert!("pca".parse::<SelectionMethod>().is_err());
    }

    #[test]
    fn design_matrix_respects_subject_subsets() {
        use crate::dataio::{generate_cohort, SynthSpec};
        let cohort = generate_cohort(&SynthSpec {
            n_subjects: 3,
            n_days: 10,
            n_features: 4,
            domain_shift_scale: 0.0,
            anomaly_rate: 0.0,
            missing_rate: 0.0,
            seed: 2,
        })
        .unwrap();
        let all = design_matrix(&cohort, None);
        assert_eq!(all.n, 30);
        assert_eq!(all.f, 4);
        let ids: BTreeSet<u32> = [0, 2].into_iter().collect();
        let sub = design_matrix(&cohort, Some(&ids));
        assert_eq!(sub.n, 20);
    }
}

//! Fold-construction properties and distribution-shift behavior of the
//! synthetic generator.

use adaptcast_core::dataio::{
    generate_cohort, make_folds, Cohort, SubjectSeries, SynthSpec, ValPolicy,
};
use adaptcast_core::tensor::ArrayD;
use proptest::prelude::*;

fn cohort_of(n: usize) -> Cohort {
    let t = 3;
    let f = 1;
    let subjects = (0..n)
        .map(|i| SubjectSeries {
            subject_id: (i * 3 + 1) as u32, // non-contiguous ids
            days: (0..t as i64).collect(),
            features: ArrayD::from_vec(&[t, f], vec![1.0; t * f]),
            target: vec![50.0; t],
            missing_mask: vec![false; t * (f + 1)],
        })
        .collect();
    Cohort::new(subjects, vec!["A".into()]).unwrap()
}

proptest! {
    #[test]
    fn folds_cover_and_are_disjoint(n in 3usize..20) {
        let cohort = cohort_of(n);
        let all: std::collections::BTreeSet<u32> =
            cohort.subject_ids().into_iter().collect();
        let folds = make_folds(&cohort, ValPolicy::NextSubject).unwrap();
        prop_assert_eq!(folds.len(), n);
        for fold in &folds {
            prop_assert_ne!(fold.val_id, fold.test_id);
            prop_assert!(!fold.train_ids.contains(&fold.val_id));
            prop_assert!(!fold.train_ids.contains(&fold.test_id));
            prop_assert_eq!(fold.train_ids.len(), n - 2);
            let mut union = fold.train_ids.clone();
            union.insert(fold.val_id);
            union.insert(fold.test_id);
            prop_assert_eq!(&union, &all);
        }
        // Each subject is the test subject exactly once.
        let tests: std::collections::BTreeSet<u32> =
            folds.iter().map(|f| f.test_id).collect();
        prop_assert_eq!(&tests, &all);
    }
}

/// Nearest-centroid (a linear classifier) on per-window feature means must
/// identify subjects above chance once the shift knob reaches 1.0.
#[test]
fn shifted_subjects_are_linearly_separable() {
    let window = 5;
    let mut acc_sum = 0.0;
    let n_seeds = 5;
    for seed in 0..n_seeds {
        let spec = SynthSpec {
            n_subjects: 4,
            n_days: 40,
            n_features: 6,
            domain_shift_scale: 1.0,
            anomaly_rate: 0.0,
            missing_rate: 0.0,
            seed: 100 + seed,
        };
        let cohort = generate_cohort(&spec).unwrap();

        // Sliding-window mean vectors, labeled by subject.
        let mut samples: Vec<(usize, Vec<f64>)> = Vec::new();
        for (si, s) in cohort.subjects.iter().enumerate() {
            let nf = s.n_features();
            for start in 0..=(s.n_days() - window) {
                let mut m = vec![0.0; nf];
                for t in start..start + window {
                    for f in 0..nf {
                        m[f] += s.feature(t, f) / window as f64;
                    }
                }
                samples.push((si, m));
            }
        }

        // Standardize columns, then split alternating windows train/test.
        let nf = samples[0].1.len();
        for f in 0..nf {
            let vals: Vec<f64> = samples.iter().map(|(_, m)| m[f]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / vals.len() as f64)
                .sqrt()
                .max(1e-12);
            for s in &mut samples {
                s.1[f] = (s.1[f] - mean) / sd;
            }
        }
        let train: Vec<&(usize, Vec<f64>)> =
            samples.iter().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, s)| s).collect();
        let test: Vec<&(usize, Vec<f64>)> =
            samples.iter().enumerate().filter(|(i, _)| i % 2 == 1).map(|(_, s)| s).collect();

        let mut centroids = vec![vec![0.0; nf]; spec.n_subjects];
        let mut counts: Vec<f64> = vec![0.0; spec.n_subjects];
        for (label, m) in &train {
            counts[*label] += 1.0;
            for f in 0..nf {
                centroids[*label][f] += m[f];
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= n.max(1.0);
            }
        }

        let mut correct = 0usize;
        for (label, m) in &test {
            let pred = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(m.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.iter().zip(m.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            if pred == *label {
                correct += 1;
            }
        }
        acc_sum += correct as f64 / test.len() as f64;
    }
    let mean_acc = acc_sum / n_seeds as f64;
    let chance = 1.0 / 4.0;
    assert!(
        mean_acc > chance + 0.1,
        "mean accuracy {mean_acc:.3} not above chance {chance} + 0.1"
    );
}

//! Randomized invariants over the numeric kernels, the training
//! objective, and the data pipeline.

use proptest::prelude::*;

use simpal::data::{
    apply_category_shift, generate_domains, CategoryShift, ShiftConfig, SourceBatcher,
};
use simpal::model::LogitMatrix;
use simpal::numeric::{log_softmax, softmax, Matrix};
use simpal::objective::{bound_ce, ensemble_ce};

fn shift_config(n_sources: usize, n_classes: usize, per_class: usize, seed: u64) -> ShiftConfig {
    let n = n_sources + 1;
    ShiftConfig {
        n_source_domains: n_sources,
        n_classes,
        d_in: 2,
        samples_per_class_per_domain: per_class,
        rotation_per_domain: (0..n).map(|i| 0.2 * i as f64).collect(),
        translation_per_domain: vec![vec![0.0, 0.0]; n],
        scale_per_domain: vec![1.0; n],
        cluster_noise_std: 0.3,
        seed,
    }
}

fn logit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0f64..20.0, len)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in logit_vec(7)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(v in logit_vec(5), shift in -50.0f64..50.0) {
        let p = softmax(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_softmax(v in logit_vec(6)) {
        let p = softmax(&v);
        let lp = log_softmax(&v);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-10);
        }
    }

    #[test]
    fn surrogate_upper_bounds_ensemble_loss(
        data in proptest::collection::vec(-10.0f64..10.0, 3 * 4),
        y in 0usize..4,
    ) {
        let m = LogitMatrix(Matrix::new(3, 4, data).unwrap());
        let bound = bound_ce(&m, y).unwrap();
        let exact = ensemble_ce(&m, y).unwrap();
        prop_assert!(bound >= exact - 1e-9, "bound {bound} < exact {exact}");
    }

    #[test]
    fn surrogate_is_tight_for_identical_rows(
        row in proptest::collection::vec(-10.0f64..10.0, 5),
        y in 0usize..5,
        n_rows in 1usize..5,
    ) {
        let data: Vec<f64> = std::iter::repeat(row).take(n_rows).flatten().collect();
        let m = LogitMatrix(Matrix::new(n_rows, 5, data).unwrap());
        let gap = bound_ce(&m, y).unwrap() - ensemble_ce(&m, y).unwrap();
        prop_assert!(gap.abs() < 1e-12, "gap {gap}");
    }

    #[test]
    fn matmul_is_associative(
        a in proptest::collection::vec(-2.0f64..2.0, 64),
        b in proptest::collection::vec(-2.0f64..2.0, 64),
        c in proptest::collection::vec(-2.0f64..2.0, 64),
    ) {
        let a = Matrix::new(8, 8, a).unwrap();
        let b = Matrix::new(8, 8, b).unwrap();
        let c = Matrix::new(8, 8, c).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_are_shift_invariant_per_row(
        data in proptest::collection::vec(-10.0f64..10.0, 2 * 4),
        shifts in proptest::collection::vec(-30.0f64..30.0, 2),
        y in 0usize..4,
    ) {
        let m = LogitMatrix(Matrix::new(2, 4, data.clone()).unwrap());
        let shifted: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, x)| x + shifts[i / 4])
            .collect();
        let ms = LogitMatrix(Matrix::new(2, 4, shifted).unwrap());
        prop_assert!((ensemble_ce(&m, y).unwrap() - ensemble_ce(&ms, y).unwrap()).abs() < 1e-9);
        prop_assert!((bound_ce(&m, y).unwrap() - bound_ce(&ms, y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn category_shift_covers_all_classes(
        n_sources in 2usize..4,
        n_classes in 3usize..6,
        overlap in 1usize..3,
        seed in 0u64..50,
    ) {
        prop_assume!(overlap < n_classes);
        let mut domains = generate_domains(&shift_config(n_sources, n_classes, 4, seed)).unwrap();
        domains.pop(); // drop the target
        for &(mode, k) in &[(CategoryShift::Overlap, overlap), (CategoryShift::Disjoint, 0)] {
            let shifted = apply_category_shift(domains.clone(), mode, k).unwrap();
            let union: std::collections::BTreeSet<usize> =
                shifted.iter().flat_map(|s| s.label_set.iter().copied()).collect();
            prop_assert_eq!(union.len(), n_classes, "mode {:?}", mode);
            for s in &shifted {
                let labels = s.labels.as_ref().unwrap();
                prop_assert!(labels.iter().all(|y| s.label_set.contains(y)));
                prop_assert_eq!(labels.len(), s.features.rows());
            }
            if mode == CategoryShift::Disjoint {
                for i in 0..shifted.len() {
                    for j in i + 1..shifted.len() {
                        prop_assert!(shifted[i].label_set.is_disjoint(&shifted[j].label_set));
                    }
                }
            }
        }
    }

    #[test]
    fn source_batches_are_balanced_and_tagged(
        n_sources in 2usize..4,
        per_domain in 1usize..5,
        seed in 0u64..20,
        n_batches in 1usize..8,
    ) {
        let mut domains = generate_domains(&shift_config(n_sources, 3, 5, seed)).unwrap();
        domains.pop();
        let mut batcher = SourceBatcher::new(&domains, per_domain, seed).unwrap();
        for _ in 0..n_batches {
            let batch = batcher.next_batch(&domains);
            prop_assert_eq!(batch.len(), per_domain * n_sources);
            for tag in 0..n_sources {
                let count = batch.source_tags.iter().filter(|&&t| t == tag).count();
                prop_assert_eq!(count, per_domain);
            }
            // every row must actually come from its tagged domain
            for (i, &tag) in batch.source_tags.iter().enumerate() {
                let row = batch.features.row(i);
                let found = (0..domains[tag].len()).any(|r| domains[tag].features.row(r) == row);
                prop_assert!(found);
            }
        }
    }

    #[test]
    fn generated_domains_are_deterministic_in_seed(seed in 0u64..30) {
        let config = shift_config(2, 3, 6, seed);
        let a = generate_domains(&config).unwrap();
        let b = generate_domains(&config).unwrap();
        prop_assert_eq!(a, b);
    }
}

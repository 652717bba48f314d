use approx::assert_relative_eq;
use dermlens_core::metrics::{balanced_accuracy, macro_f1, per_class_metrics, ConfusionMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Expands the matrix into individual (truth, prediction) cases and scores each
// class one-vs-rest from those cases. F1 uses 2TP / (2TP + FP + FN).
fn oracle(counts: &[Vec<u64>], failed: &[u64]) -> (f64, f64) {
    let k = counts.len();
    let mut cases: Vec<(usize, Option<usize>)> = Vec::new();
    for t in 0..k {
        for p in 0..k {
            for _ in 0..counts[t][p] {
                cases.push((t, Some(p)));
            }
        }
        for _ in 0..failed[t] {
            cases.push((t, None));
        }
    }
    let (mut recall_sum, mut f1_sum) = (0.0, 0.0);
    for c in 0..k {
        let tp = cases.iter().filter(|(t, p)| *t == c && *p == Some(c)).count() as f64;
        let fneg = cases.iter().filter(|(t, p)| *t == c && *p != Some(c)).count() as f64;
        let fpos = cases.iter().filter(|(t, p)| *t != c && *p == Some(c)).count() as f64;
        recall_sum += tp / (tp + fneg);
        f1_sum += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fpos + fneg) };
    }
    (100.0 * recall_sum / k as f64, 100.0 * f1_sum / k as f64)
}

fn random_matrix(rng: &mut ChaCha8Rng, with_failures: bool) -> (Vec<Vec<u64>>, Vec<u64>) {
    let k = rng.random_range(1..=7);
    let mut counts: Vec<Vec<u64>> = (0..k)
        .map(|_| (0..k).map(|_| rng.random_range(0..=50)).collect())
        .collect();
    let failed: Vec<u64> = (0..k)
        .map(|_| if with_failures { rng.random_range(0..=5) } else { 0 })
        .collect();
    for t in 0..k {
        if counts[t].iter().sum::<u64>() + failed[t] == 0 {
            let p = rng.random_range(0..k);
            counts[t][p] = 1;
        }
    }
    (counts, failed)
}

fn check(counts: Vec<Vec<u64>>, failed: Vec<u64>) {
    let k = counts.len();
    let (bacc, f1) = oracle(&counts, &failed);
    let classes = (0..k).map(|i| format!("c{i}")).collect();
    let m = ConfusionMatrix::from_counts(classes, counts, Some(failed)).unwrap();
    assert_relative_eq!(balanced_accuracy(&m).unwrap(), bacc, max_relative = 1e-9, epsilon = 1e-12);
    assert_relative_eq!(macro_f1(&m).unwrap(), f1, max_relative = 1e-9, epsilon = 1e-12);
}

#[test]
fn thousand_seeded_matrices_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (counts, failed) = random_matrix(&mut rng, false);
        check(counts, failed);
    }
}

#[test]
fn matrices_with_failures_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..300 {
        let (counts, failed) = random_matrix(&mut rng, true);
        check(counts, failed);
    }
}

#[test]
fn six_case_worked_example() {
    let m = ConfusionMatrix::from_counts(
        vec!["A".into(), "B".into(), "C".into()],
        vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 2]],
        None,
    )
    .unwrap();
    assert_relative_eq!(balanced_accuracy(&m).unwrap(), 250.0 / 3.0, epsilon = 1e-12);
    assert!((macro_f1(&m).unwrap() - 82.22).abs() < 0.01);
    let per_class = per_class_metrics(&m).unwrap();
    assert_relative_eq!(per_class[1].bacc_percent, 75.0, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn metrics_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (counts, failed) = random_matrix(&mut rng, true);
        let k = counts.len();
        let m = ConfusionMatrix::from_counts((0..k).map(|i| format!("c{i}")).collect(), counts, Some(failed)).unwrap();
        let bacc = balanced_accuracy(&m).unwrap();
        let f1 = macro_f1(&m).unwrap();
        prop_assert!((0.0..=100.0).contains(&bacc));
        prop_assert!((0.0..=100.0).contains(&f1));
    }

    #[test]
    fn diagonal_matrices_score_perfectly(diag in proptest::collection::vec(1u64..50, 1..8)) {
        let k = diag.len();
        let mut counts = vec![vec![0; k]; k];
        for (i, d) in diag.iter().enumerate() {
            counts[i][i] = *d;
        }
        let m = ConfusionMatrix::from_counts((0..k).map(|i| format!("c{i}")).collect(), counts, None).unwrap();
        prop_assert_eq!(balanced_accuracy(&m).unwrap(), 100.0);
        prop_assert_eq!(macro_f1(&m).unwrap(), 100.0);
    }
}

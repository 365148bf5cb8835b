//! Property tests for the metric invariants: distance axioms, scale
//! invariance, report/marginal consistency.

use ffsense::metrics::{
    classification_report, confusion, misprediction_tables, pair_distance, AttributeTask, Averaging,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn positive_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-3..1.0f64, len)
}

proptest! {
    #[test]
    fn pair_distance_scale_invariant(
        p in positive_vec(6),
        q in positive_vec(6),
        alpha in 0.05..20.0f64,
        beta in 0.05..20.0f64,
    ) {
        let base = pair_distance(&p, &q).unwrap().value();
        let ps: Vec<f64> = p.iter().map(|x| x * alpha).collect();
        let qs: Vec<f64> = q.iter().map(|x| x * beta).collect();
        let scaled = pair_distance(&ps, &qs).unwrap().value();
        prop_assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn pair_distance_symmetric_and_bounded(
        p in positive_vec(5),
        q in positive_vec(5),
    ) {
        let d_pq = pair_distance(&p, &q).unwrap().value();
        let d_qp = pair_distance(&q, &p).unwrap().value();
        prop_assert!((d_pq - d_qp).abs() < 1e-12);
        // non-negative inputs keep normalized vectors in one orthant
        prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&d_pq));
        prop_assert!(pair_distance(&p, &p).unwrap().value() == 0.0);
    }
}

#[test]
fn pair_distance_triangle_inequality_over_random_triples() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    for _ in 0..1000 {
        let len = rng.random_range(2..8usize);
        let mut sample = || -> Vec<f64> { (0..len).map(|_| rng.random_range(1e-3..1.0)).collect() };
        let (a, b, c) = (sample(), sample(), sample());
        let ab = pair_distance(&a, &b).unwrap().value();
        let bc = pair_distance(&b, &c).unwrap().value();
        let ac = pair_distance(&a, &c).unwrap().value();
        assert!(
            ac <= ab + bc + 1e-9,
            "triangle violated: {ac} > {ab} + {bc}"
        );
    }
}

#[test]
fn misprediction_tables_equal_confusion_marginals_on_random_labels() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    for trial in 0..500 {
        let task = if trial % 2 == 0 {
            AttributeTask::Gender
        } else {
            AttributeTask::Ethnicity
        };
        let classes = task.classes();
        let n = rng.random_range(1..40usize);
        let actual: Vec<String> = (0..n)
            .map(|_| classes[rng.random_range(0..classes.len())].to_string())
            .collect();
        let predicted: Vec<String> = (0..n)
            .map(|_| classes[rng.random_range(0..classes.len())].to_string())
            .collect();
        let per_filter = vec![("f".to_string(), actual.clone(), predicted.clone())];
        let table = misprediction_tables(&per_filter, task).unwrap();
        let row = table.row("f").unwrap();

        let class_vec: Vec<&str> = classes.to_vec();
        let matrix = confusion(
            &actual.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            &predicted.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            &class_vec,
        )
        .unwrap();
        match task {
            AttributeTask::Gender => {
                assert_eq!(row.count("male->female").unwrap(), matrix.counts[0][1]);
                assert_eq!(row.count("female->male").unwrap(), matrix.counts[1][0]);
            }
            AttributeTask::Ethnicity => {
                for (j, class) in classes.iter().enumerate() {
                    assert_eq!(row.count(class).unwrap(), matrix.wrongly_predicted_as(j));
                }
            }
        }
    }
}

#[test]
fn accuracy_equals_confusion_trace_on_random_labels() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let pool = ["a", "b", "c", "d"];
    for _ in 0..200 {
        let n = rng.random_range(1..50usize);
        let actual: Vec<&str> = (0..n).map(|_| pool[rng.random_range(0..4)]).collect();
        let predicted: Vec<&str> = (0..n).map(|_| pool[rng.random_range(0..4)]).collect();
        let report = classification_report(&actual, &predicted, Averaging::Macro).unwrap();
        let matrix = confusion(&actual, &predicted, &pool.to_vec()).unwrap();
        let trace_acc = matrix.trace() as f64 / matrix.total() as f64;
        assert!((report.accuracy - trace_acc).abs() < 1e-15);
    }
}

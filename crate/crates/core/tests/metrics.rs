mod common;

use common::*;
use proptest::prelude::*;
use shipreid::eval::{average_precision, EmbeddingSet};

#[test]
fn matches_brute_force_oracle() {
    let checked: usize = (0..100).map(|s| compare_with_oracle(s).unwrap()).sum();
    assert!(checked > 100, "only {checked} protocol instances had matches");
}

#[test]
fn hand_examples() {
    let ap = average_precision(&[true, false, true], 2).unwrap();
    assert!((ap - 0.83333).abs() < 1e-5);
    // mAP is the plain mean of per-query APs: 1, 0.5 and 5/6.
    let (map, _, n) = brute_force_metrics(
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1], vec![0.6, 0.8], vec![0.9, 0.0]],
        &[0, 1, 0, 1, 0],
        &[0, 1],
        &[2, 3, 4],
    );
    assert_eq!(n, 2);
    assert!((map - 1.0).abs() < 1e-12);
}

#[test]
fn embeddings_are_unit_norm() {
    let set = EmbeddingSet::from_rows(3, vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    for i in 0..set.len() {
        let n: f64 = set.row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn ap_is_a_probability(rel in prop::collection::vec(any::<bool>(), 1..30)) {
        let g = rel.iter().filter(|&&x| x).count();
        match average_precision(&rel, g) {
            Some(ap) => prop_assert!((0.0..=1.0).contains(&ap)),
            None => prop_assert_eq!(g, 0),
        }
    }

    #[test]
    fn oracle_agreement(seed in any::<u64>()) {
        prop_assert!(compare_with_oracle(seed).is_ok());
    }
}

//! Property tests over the building blocks of the merge.

use std::collections::BTreeMap;

use doge_core::checkpoint::{Checkpoint, TensorEntry};
use doge_core::linalg::{svd, Matrix};
use doge_core::objective::{grad_delta, loss, LayerProblem, ProjectionMode};
use doge_core::subspace::{build_shared_basis, extract_task_basis, project, project_out};
use doge_core::taskvec::{combine, keep_count, trim_by_magnitude, LambdaTable, TaskVector};
use proptest::prelude::*;

fn task_vector(values: Vec<f32>, split: usize) -> TaskVector {
    let split = split.min(values.len());
    let mut layers = BTreeMap::new();
    let (a, b) = values.split_at(split);
    layers.insert(
        "a".to_string(),
        TensorEntry::new("a", vec![a.len()], a.to_vec()).unwrap(),
    );
    layers.insert(
        "b".to_string(),
        TensorEntry::new("b", vec![b.len()], b.to_vec()).unwrap(),
    );
    TaskVector { task_id: 1, layers }
}

fn flat(tv: &TaskVector) -> Vec<f32> {
    tv.layers
        .values()
        .flat_map(|t| t.data.iter().copied())
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trim_keeps_the_largest_magnitudes(
        values in prop::collection::vec(-10.0f32..10.0, 1..40),
        split in 0usize..40,
        f in 0.01f64..=1.0,
    ) {
        let tv = task_vector(values, split);
        let trimmed = trim_by_magnitude(&tv, f).unwrap();
        let (before, after) = (flat(&tv), flat(&trimmed));
        let nonzero_kept = after.iter().filter(|v| **v != 0.0).count();
        prop_assert!(nonzero_kept <= keep_count(before.len(), f));
        // Every survivor is unchanged and no dropped entry beats a survivor.
        let min_kept = after.iter().zip(&before).filter(|(a, _)| **a != 0.0).map(|(_, b)| b.abs()).fold(f32::INFINITY, f32::min);
        for (a, b) in after.iter().zip(&before) {
            if *a != 0.0 {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!(b.abs() <= min_kept);
            }
        }
    }

    #[test]
    fn trim_is_idempotent_and_monotone(
        values in prop::collection::vec(-10.0f32..10.0, 1..40),
        split in 0usize..40,
        f1 in 0.01f64..=1.0,
        f2 in 0.01f64..=1.0,
    ) {
        let tv = task_vector(values, split);
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let once = trim_by_magnitude(&tv, lo).unwrap();
        prop_assert_eq!(flat(&trim_by_magnitude(&once, lo).unwrap()), flat(&once));
        let wide = flat(&trim_by_magnitude(&tv, hi).unwrap());
        for (narrow, wide) in flat(&once).iter().zip(&wide) {
            if *narrow != 0.0 {
                prop_assert_eq!(narrow, wide);
            }
        }
    }

    #[test]
    fn full_keep_fraction_is_identity(values in prop::collection::vec(-10.0f32..10.0, 1..40), split in 0usize..40) {
        let tv = task_vector(values, split);
        prop_assert_eq!(trim_by_magnitude(&tv, 1.0).unwrap(), tv);
    }

    #[test]
    fn combine_is_linear_in_lambda(
        values in prop::collection::vec(-10.0f32..10.0, 2..30),
        lambda in 0.0f64..2.0,
        c in 0.1f64..4.0,
    ) {
        let tv = task_vector(values, 3);
        let keys: Vec<String> = tv.layers.keys().cloned().collect();
        let tvs = [tv];
        let base = combine(&tvs, &LambdaTable::uniform(&tvs, &keys, lambda), None).unwrap();
        let scaled = combine(&tvs, &LambdaTable::uniform(&tvs, &keys, c * lambda), None).unwrap();
        for (k, layer) in &base {
            for (x, y) in layer.data.iter().zip(&scaled[k].data) {
                prop_assert!((c * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn projector_splits_any_matrix(a in matrix(6, 4), source in matrix(6, 5), k in 1usize..=5) {
        let basis = extract_task_basis("w", &source, k, 1).unwrap();
        let p = project(&basis, &a).unwrap();
        let q = project_out(&basis, &a).unwrap();
        prop_assert!(p.add(&q).sub(&a).frobenius() <= 1e-12 * (1.0 + a.frobenius()));
        prop_assert!(p.dot(&q).abs() <= 1e-10 * (1.0 + a.frobenius().powi(2)));
        prop_assert!(project(&basis, &q).unwrap().frobenius() <= 1e-10 * (1.0 + a.frobenius()));
    }

    #[test]
    fn shared_basis_of_full_task_bases_absorbs_task_vectors(t1 in matrix(5, 7), t2 in matrix(5, 7)) {
        let b1 = extract_task_basis("w", &t1, 5, 1).unwrap();
        let b2 = extract_task_basis("w", &t2, 5, 2).unwrap();
        let (shared, warning) = build_shared_basis(&[b1, b2], 5).unwrap();
        prop_assert!(warning.is_none());
        prop_assert!(project_out(&shared, &t1).unwrap().frobenius() <= 1e-9 * (1.0 + t1.frobenius()));
    }

    #[test]
    fn svd_reconstructs(a in (1usize..10, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c))) {
        let s = svd(&a).unwrap();
        prop_assert!(s.reconstruct().sub(&a).frobenius() <= 1e-10 * (1.0 + a.frobenius()));
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn loss_at_zero_matches_closed_form(t1 in matrix(3, 4), t2 in matrix(3, 4), l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
        let basis = extract_task_basis("w", &t1.add(&t2), 1, 1).unwrap();
        let problem = LayerProblem::new("w", vec![t1.clone(), t2.clone()], vec![l1, l2], basis, ProjectionMode::None).unwrap();
        let expected: f64 = [&t1, &t2]
            .iter()
            .map(|tj| {
                let s = tj.dot(tj) - l1 * tj.dot(&t1) - l2 * tj.dot(&t2);
                s * s
            })
            .sum();
        prop_assert!((loss(&problem) - expected).abs() <= 1e-9 * (1.0 + expected));
        // The gradient lies in span{τ_j}: nothing survives projecting it out.
        let span = extract_task_basis("w", &Matrix::hstack(&[&t1, &t2]), 3, 1).unwrap();
        let g = grad_delta(&problem);
        prop_assert!(project_out(&span, &g).unwrap().frobenius() <= 1e-9 * (1.0 + g.frobenius()));
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::btree_map(
            "[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}",
            prop::collection::vec(any::<u32>(), 0..12),
            0..5,
        ),
    ) {
        let mut c = Checkpoint::new();
        for (key, bits) in &tensors {
            c.insert_tensor(key, vec![bits.len()], bits.iter().map(|b| f32::from_bits(*b)).collect()).unwrap();
        }
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&c));
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }
}

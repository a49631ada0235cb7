//! Analytic gradients against central finite differences, in f64.

#[path = "oracles/finite_diff.rs"]
mod finite_diff;

use cotlab::model::{gradients, Parameters, TrainExample};
use finite_diff::{micro_config, worst_relative_error};

#[test]
fn analytic_gradients_match_finite_differences() {
    let (rel, at) = worst_relative_error(false);
    assert!(rel < 1e-4, "{at} (rel {rel:e})");
}

#[test]
fn tied_embedding_gradients_match_finite_differences() {
    let (rel, at) = worst_relative_error(true);
    assert!(rel < 1e-4, "{at} (rel {rel:e})");
}

#[test]
fn masked_only_token_gets_zero_embedding_gradient() {
    let params = Parameters::<f64>::init(&micro_config(false)).unwrap();
    // Token 29 appears only as a target at a zero-weight position.
    let b = vec![TrainExample {
        tokens: vec![1, 2, 3, 4],
        targets: vec![2, 3, 29, 5],
        weights: vec![1.0, 1.0, 0.0, 1.0],
    }];
    let (grad, _) = gradients(&params, &b).unwrap();
    assert!(grad.token_embedding.row(29).iter().all(|&g| g == 0.0));
    let out = grad.output_projection.unwrap();
    assert!(out.column(29).iter().any(|&g| g != 0.0));
}

#[test]
fn zero_mask_gives_zero_gradients() {
    let params = Parameters::<f64>::init(&micro_config(false)).unwrap();
    let b = vec![TrainExample {
        tokens: vec![1, 2, 3],
        targets: vec![2, 3, 4],
        weights: vec![0.0; 3],
    }];
    let (grad, value) = gradients(&params, &b).unwrap();
    assert!(value.all_masked);
    assert_eq!(value.value, 0.0);
    assert_eq!(grad.global_norm(), 0.0);
}

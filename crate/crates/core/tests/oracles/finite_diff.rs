//! Central finite differences over every parameter of a micro model, in f64.
#![allow(dead_code)]

use cotlab::model::{forward, gradients, loss, ModelConfig, Parameters, TrainExample};

pub fn micro_config(tied: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 32,
        max_context: 12,
        seed: 17,
        tie_embeddings: tied,
    }
}

pub fn batch() -> Vec<TrainExample> {
    vec![
        TrainExample {
            tokens: vec![1, 5, 9, 30, 2, 7],
            targets: vec![5, 9, 30, 2, 7, 3],
            weights: vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0],
        },
        TrainExample {
            tokens: vec![4, 4, 11, 12],
            targets: vec![4, 11, 12, 31],
            weights: vec![1.0, 0.0, 1.0, 1.0],
        },
    ]
}

/// Reference loss computed through the public forward pass, one sequence at
/// a time, pooled into a single token-level mean.
pub fn batch_loss(params: &Parameters<f64>, batch: &[TrainExample]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ex in batch {
        let logits = forward(params, &ex.tokens, false).unwrap().logits;
        let w: f64 = ex.weights.iter().sum();
        num += loss(&logits, &ex.targets, &ex.weights).unwrap().value * w;
        den += w;
    }
    num / den
}

pub fn perturb(params: &Parameters<f64>, tensor: usize, index: usize, delta: f64) -> Parameters<f64> {
    let mut p = params.clone();
    let mut tensors = p.tensors_mut();
    let (_, t) = &mut tensors[tensor];
    let slot = t.iter_mut().nth(index).unwrap();
    *slot += delta;
    drop(tensors);
    p
}

/// Largest elementwise relative error between analytic and numeric
/// gradients, with the tensor entry where it occurred.
pub fn worst_relative_error(tied: bool) -> (f64, String) {
    let mut params = Parameters::<f64>::init(&micro_config(tied)).unwrap();
    // Move away from the symmetric init so every path carries signal.
    for (i, (_, mut t)) in params.tensors_mut().into_iter().enumerate() {
        for (j, x) in t.iter_mut().enumerate() {
            *x += 0.05 * (((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        }
    }
    let b = batch();
    let (grad, value) = gradients(&params, &b).unwrap();
    assert!((value.value - batch_loss(&params, &b)).abs() < 1e-12);

    let h = 1e-5;
    let mut worst = (0.0, String::new());
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    for (ti, name) in names.iter().enumerate() {
        for (j, &analytic) in grads[ti].iter().enumerate() {
            let plus = batch_loss(&perturb(&params, ti, j, h), &b);
            let minus = batch_loss(&perturb(&params, ti, j, -h), &b);
            let numeric = (plus - minus) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic - numeric).abs() / scale;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}]: analytic {analytic:e} vs numeric {numeric:e}"));
            }
        }
    }
    worst
}

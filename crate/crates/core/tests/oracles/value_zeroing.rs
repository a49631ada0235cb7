//! Brute-force Value Zeroing: rebuild a one-layer model from its raw weights
//! with plain loops, once per zeroed token.
#![allow(dead_code, clippy::needless_range_loop)]

use cotlab::attribution::{value_zeroing_matrix, Distance};
use cotlab::model::{forward, ModelConfig, Parameters};

type Mat = Vec<Vec<f64>>;

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|k| (x[k] - mean) * rstd * gain[k] + bias[k]).collect()
}

fn affine(x: &[f64], w: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|c| b[c] + (0..x.len()).map(|r| x[r] * w[[r, c]]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Layer-0 output with value row `zeroed` (if any) removed.
fn rebuild(p: &Parameters<f64>, tokens: &[u32], zeroed: Option<usize>) -> Mat {
    let cfg = &p.config;
    let l = &p.layers[0];
    let t = tokens.len();
    let dh = cfg.d_model / cfg.n_heads;
    let x: Mat = (0..t)
        .map(|i| {
            (0..cfg.d_model)
                .map(|k| p.token_embedding[[tokens[i] as usize, k]] + p.position_embedding[[i, k]])
                .collect()
        })
        .collect();
    let g = l.attn_norm.gain.to_vec();
    let b = l.attn_norm.bias.to_vec();
    let h: Mat = x.iter().map(|r| layer_norm(r, &g, &b)).collect();
    let q: Mat = h.iter().map(|r| affine(r, &l.wq, &l.bq)).collect();
    let k: Mat = h.iter().map(|r| affine(r, &l.wk, &l.bk)).collect();
    let mut v: Mat = h.iter().map(|r| affine(r, &l.wv, &l.bv)).collect();
    if let Some(z) = zeroed {
        v[z] = vec![0.0; cfg.d_model];
    }
    let mut attn = vec![vec![0.0; cfg.d_model]; t];
    for head in 0..cfg.n_heads {
        let cols = head * dh..(head + 1) * dh;
        for j in 0..t {
            let scores: Vec<f64> = (0..=j)
                .map(|i| cols.clone().map(|c| q[j][c] * k[i][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in 0..=j {
                for c in cols.clone() {
                    attn[j][c] += e[i] / z * v[i][c];
                }
            }
        }
    }
    let g2 = l.ffn_norm.gain.to_vec();
    let b2 = l.ffn_norm.bias.to_vec();
    (0..t)
        .map(|j| {
            let o = affine(&attn[j], &l.wo, &l.bo);
            let mid: Vec<f64> = (0..cfg.d_model).map(|c| x[j][c] + o[c]).collect();
            let h2 = layer_norm(&mid, &g2, &b2);
            let act: Vec<f64> = affine(&h2, &l.w_in, &l.b_in).into_iter().map(gelu).collect();
            let f = affine(&act, &l.w_out, &l.b_out);
            (0..cfg.d_model).map(|c| mid[c] + f[c]).collect()
        })
        .collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).max(0.0)
}

pub fn oracle(p: &Parameters<f64>, tokens: &[u32]) -> Mat {
    let t = tokens.len();
    let original = rebuild(p, tokens, None);
    let mut c = vec![vec![0.0; t]; t];
    for i in 0..t {
        let perturbed = rebuild(p, tokens, Some(i));
        for j in 0..t {
            c[j][i] = cosine_distance(&original[j], &perturbed[j]);
        }
    }
    for row in &mut c {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    c
}

/// Largest elementwise gap between the library matrix and the rebuild over
/// a few seeded 1-layer, 2-head models and prompts of at most 8 tokens.
pub fn max_abs_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, tokens) in [
        (1u64, vec![0u32, 5, 9, 2, 17, 30, 4, 11]),
        (2, vec![3, 3, 3, 8, 1]),
        (3, vec![31, 0, 12]),
    ] {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 32,
            max_context: 8,
            seed,
            tie_embeddings: false,
        };
        let mut p = Parameters::<f64>::init(&cfg).unwrap();
        // Larger weights make the attention patterns far from uniform.
        for (_, mut t) in p.tensors_mut() {
            t.mapv_inplace(|x| x * 20.0);
        }
        let trace = forward(&p, &tokens, true).unwrap().trace.unwrap();
        let lib = value_zeroing_matrix(&p, &tokens, &trace, Distance::Cosine).unwrap();
        let expect = oracle(&p, &tokens);
        for j in 0..tokens.len() {
            for i in 0..tokens.len() {
                worst = worst.max((lib.layers[0][[j, i]] - expect[j][i]).abs());
            }
        }
    }
    worst
}

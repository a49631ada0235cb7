use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{forward_packed, gelu_grad, LayerCache, NormCache};
use super::{Float, LayerParams, Norm, Parameters};
use crate::error::{LabError, Result};
use crate::vocab::TokenId;

/// One training sequence: `targets[t]` is the token that should follow
/// `tokens[..=t]`, weighted by `weights[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Set when every weight was zero; `value` is then 0 by definition.
    pub all_masked: bool,
}

/// Mean weighted cross-entropy of `logits` (`T × V`) against `targets`.
pub fn loss<F: Float>(logits: &Array2<F>, targets: &[TokenId], mask: &[f64]) -> Result<LossValue> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(LabError::Data(format!(
            "misaligned loss inputs: {} logits rows, {} targets, {} weights",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let total: f64 = mask.iter().sum();
    if total == 0.0 {
        log::warn!("loss over an all-zero mask is defined as 0");
        return Ok(LossValue {
            value: 0.0,
            all_masked: true,
        });
    }
    let mut acc = 0.0;
    for ((row, &t), &w) in logits.outer_iter().zip(targets).zip(mask) {
        if w == 0.0 {
            continue;
        }
        let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        acc += w * (lse - row[t as usize]);
    }
    Ok(LossValue {
        value: acc / total,
        all_masked: false,
    })
}

fn sum_rows<F: Float>(x: &Array2<F>) -> Array1<F> {
    x.sum_axis(Axis(0))
}

fn norm_backward<F: Float>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    norm: &Norm<F>,
    grad: &mut Norm<F>,
) -> Array2<F> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &norm.gain;
    let d = F::lit(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        let rs = cache.rstd[r];
        for ((o, &gi), &xi) in dx.row_mut(r).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = rs * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

fn accumulate_linear<F: Float>(
    x: &ArrayView2<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) {
    *dw += &x.t().dot(dy);
    *db += &sum_rows(dy);
}

fn layer_backward<F: Float>(
    layer: &LayerParams<F>,
    cache: &LayerCache<F>,
    spans: &[std::ops::Range<usize>],
    n_heads: usize,
    d_out: Array2<F>,
    grad: &mut LayerParams<F>,
) -> Array2<F> {
    let dh = layer.wq.ncols() / n_heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();

    // Feed-forward half.
    let mut d_mid = d_out.clone();
    accumulate_linear(&cache.act.view(), &d_out, &mut grad.w_out, &mut grad.b_out);
    let d_act = d_out.dot(&layer.w_out.t());
    let d_pre = &d_act * &cache.pre_act.mapv(gelu_grad);
    accumulate_linear(&cache.h2.view(), &d_pre, &mut grad.w_in, &mut grad.b_in);
    let d_h2 = d_pre.dot(&layer.w_in.t());
    d_mid += &norm_backward(&d_h2, &cache.ffn_norm, &layer.ffn_norm, &mut grad.ffn_norm);

    // Attention half.
    accumulate_linear(&cache.attn.view(), &d_mid, &mut grad.wo, &mut grad.bo);
    let d_attn = d_mid.dot(&layer.wo.t());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for (si, span) in spans.iter().enumerate() {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let probs = &cache.probs[si * n_heads + h];
            let d_o = d_attn.slice(s![span.clone(), cols.clone()]);
            let qh = cache.q.slice(s![span.clone(), cols.clone()]);
            let kh = cache.k.slice(s![span.clone(), cols.clone()]);
            let vh = cache.v.slice(s![span.clone(), cols.clone()]);
            dv.slice_mut(s![span.clone(), cols.clone()])
                .assign(&probs.t().dot(&d_o));
            let d_p = d_o.dot(&vh.t());
            let mut d_s = &d_p * probs;
            let row_dot = d_s.sum_axis(Axis(1));
            for (i, mut row) in d_s.outer_iter_mut().enumerate() {
                let c = row_dot[i];
                for (j, v) in row.iter_mut().enumerate() {
                    *v -= probs[[i, j]] * c;
                }
            }
            d_s *= scale;
            dq.slice_mut(s![span.clone(), cols.clone()])
                .assign(&d_s.dot(&kh));
            dk.slice_mut(s![span.clone(), cols])
                .assign(&d_s.t().dot(&qh));
        }
    }
    let h1 = cache.h1.view();
    accumulate_linear(&h1, &dq, &mut grad.wq, &mut grad.bq);
    accumulate_linear(&h1, &dk, &mut grad.wk, &mut grad.bk);
    accumulate_linear(&h1, &dv, &mut grad.wv, &mut grad.bv);
    let d_h1 = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
    d_mid + norm_backward(&d_h1, &cache.attn_norm, &layer.attn_norm, &mut grad.attn_norm)
}

/// Exact gradient of the batch loss: every weighted position of every
/// example contributes to one token-level mean.
pub fn gradients<F: Float>(
    params: &Parameters<F>,
    batch: &[TrainExample],
) -> Result<(Parameters<F>, LossValue)> {
    for ex in batch {
        if ex.tokens.len() != ex.targets.len() || ex.tokens.len() != ex.weights.len() {
            return Err(LabError::Data(
                "tokens, targets and weights must have equal length".into(),
            ));
        }
        if let Some(&t) = ex
            .targets
            .iter()
            .find(|&&t| t as usize >= params.config.vocab_size)
        {
            return Err(LabError::Data(format!("target {t} outside vocabulary")));
        }
    }
    let mut grad = params.zeros_like();
    let total: f64 = batch.iter().flat_map(|ex| ex.weights.iter()).sum();
    if total == 0.0 {
        return Ok((
            grad,
            LossValue {
                value: 0.0,
                all_masked: true,
            },
        ));
    }
    let seqs: Vec<&[TokenId]> = batch.iter().map(|ex| ex.tokens.as_slice()).collect();
    let cache = forward_packed(params, &seqs)?;
    let unembed = params.unembedding();

    // Only weighted positions reach the output projection.
    let targets: Vec<TokenId> = batch.iter().flat_map(|ex| ex.targets.iter().copied()).collect();
    let weights: Vec<f64> = batch.iter().flat_map(|ex| ex.weights.iter().copied()).collect();
    let active: Vec<usize> = (0..weights.len()).filter(|&r| weights[r] != 0.0).collect();
    let hidden = cache.hidden.select(Axis(0), &active);
    let mut d_logits = hidden.dot(&unembed);
    let mut loss_acc = 0.0f64;
    for (mut row, &r) in d_logits.outer_iter_mut().zip(&active) {
        let w = weights[r];
        let t = targets[r] as usize;
        let max = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let shifted_target = (row[t] - max).as_f64();
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        loss_acc += w * (z.as_f64().ln() - shifted_target);
        let coef = F::lit(w / total);
        row.mapv_inplace(|v| v / z * coef);
        row[t] -= coef;
    }

    let d_active = d_logits.dot(&unembed.t());
    let mut d_hidden = Array2::zeros(cache.hidden.dim());
    for (i, &r) in active.iter().enumerate() {
        d_hidden.row_mut(r).assign(&d_active.row(i));
    }
    match &mut grad.output_projection {
        Some(g) => *g += &hidden.t().dot(&d_logits),
        None => grad.token_embedding += &d_logits.t().dot(&hidden),
    }
    let mut dx = norm_backward(
        &d_hidden,
        &cache.final_norm,
        &params.final_norm,
        &mut grad.final_norm,
    );
    for (l, layer_cache) in cache.layers.iter().enumerate().rev() {
        dx = layer_backward(
            &params.layers[l],
            layer_cache,
            &cache.spans,
            params.config.n_heads,
            dx,
            &mut grad.layers[l],
        );
    }
    for (r, (&t, &p)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
        let g = dx.row(r);
        let mut e = grad.token_embedding.row_mut(t as usize);
        e += &g;
        let mut pe = grad.position_embedding.row_mut(p);
        pe += &g;
    }
    Ok((
        grad,
        LossValue {
            value: loss_acc / total,
            all_masked: false,
        },
    ))
}

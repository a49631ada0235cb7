use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2};

use super::{Float, LayerParams, ModelConfig, Norm, Parameters, NORM_EPS};
use crate::error::{LabError, Result};
use crate::vocab::TokenId;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * d_inner
}

pub(crate) struct NormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) fn norm_forward<F: Float>(x: &Array2<F>, norm: &Norm<F>) -> (Array2<F>, NormCache<F>) {
    let (n, d) = x.dim();
    let eps = F::lit(NORM_EPS);
    let inv_d = F::one() / F::lit(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * rs;
        }
    }
    let y = &xhat * &norm.gain + &norm.bias;
    (y, NormCache { xhat, rstd })
}

fn linear<F: Float>(x: &ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    x.dot(w) + b
}

/// Row-wise softmax restricted to the causal triangle; entries above the
/// diagonal become exactly zero.
fn causal_softmax<F: Float>(scores: &mut Array2<F>) {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let max = row
            .iter()
            .take(i + 1)
            .fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut total = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / total);
    }
}

pub(crate) struct LayerCache<F> {
    pub input: Array2<F>,
    pub attn_norm: NormCache<F>,
    pub h1: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Indexed by `seq * n_heads + head`.
    pub probs: Vec<Array2<F>>,
    pub attn: Array2<F>,
    pub ffn_norm: NormCache<F>,
    pub h2: Array2<F>,
    pub pre_act: Array2<F>,
    pub act: Array2<F>,
    pub output: Array2<F>,
}

/// Residual feed-forward half of a block: `mid + W_out·gelu(W_in·LN(mid))`.
fn ffn_block<F: Float>(layer: &LayerParams<F>, mid: Array2<F>) -> Array2<F> {
    let (h2, _) = norm_forward(&mid, &layer.ffn_norm);
    let act = linear(&h2.view(), &layer.w_in, &layer.b_in).mapv(gelu);
    let f = linear(&act.view(), &layer.w_out, &layer.b_out);
    mid + f
}

pub(crate) fn layer_forward<F: Float>(
    layer: &LayerParams<F>,
    config: &ModelConfig,
    input: Array2<F>,
    spans: &[Range<usize>],
) -> LayerCache<F> {
    let dh = config.head_dim();
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let (h1, attn_norm) = norm_forward(&input, &layer.attn_norm);
    let q = linear(&h1.view(), &layer.wq, &layer.bq);
    let k = linear(&h1.view(), &layer.wk, &layer.bk);
    let v = linear(&h1.view(), &layer.wv, &layer.bv);
    let mut attn = Array2::zeros(input.dim());
    let mut probs = Vec::with_capacity(spans.len() * config.n_heads);
    for span in spans {
        for h in 0..config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![span.clone(), cols.clone()]);
            let kh = k.slice(s![span.clone(), cols.clone()]);
            let vh = v.slice(s![span.clone(), cols.clone()]);
            let mut p = qh.dot(&kh.t()) * scale;
            causal_softmax(&mut p);
            attn.slice_mut(s![span.clone(), cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    let mid = &input + &linear(&attn.view(), &layer.wo, &layer.bo);
    let (h2, ffn_norm) = norm_forward(&mid, &layer.ffn_norm);
    let pre_act = linear(&h2.view(), &layer.w_in, &layer.b_in);
    let act = pre_act.mapv(gelu);
    let output = &mid + &linear(&act.view(), &layer.w_out, &layer.b_out);
    LayerCache {
        input,
        attn_norm,
        h1,
        q,
        k,
        v,
        probs,
        attn,
        ffn_norm,
        h2,
        pre_act,
        act,
        output,
    }
}

pub(crate) struct ForwardCache<F> {
    pub spans: Vec<Range<usize>>,
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub layers: Vec<LayerCache<F>>,
    pub final_norm: NormCache<F>,
    pub hidden: Array2<F>,
}

pub(crate) fn check_tokens<F: Float>(params: &Parameters<F>, tokens: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_context {
        return Err(LabError::Overlength {
            len: tokens.len(),
            max: cfg.max_context,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(LabError::Data(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Runs a packed batch of independent sequences through every block and the
/// final norm, keeping what the backward pass needs.
pub(crate) fn forward_packed<F: Float>(
    params: &Parameters<F>,
    seqs: &[&[TokenId]],
) -> Result<ForwardCache<F>> {
    for seq in seqs {
        check_tokens(params, seq)?;
    }
    let cfg = &params.config;
    let mut spans = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for seq in seqs {
        let start = tokens.len();
        tokens.extend_from_slice(seq);
        positions.extend(0..seq.len());
        spans.push(start..tokens.len());
    }
    let mut x = Array2::zeros((tokens.len(), cfg.d_model));
    for (r, (&t, &p)) in tokens.iter().zip(&positions).enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&params.token_embedding.row(t as usize));
        row += &params.position_embedding.row(p);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let cache = layer_forward(layer, cfg, x, &spans);
        x = cache.output.clone();
        layers.push(cache);
    }
    let (hidden, final_norm) = norm_forward(&x, &params.final_norm);
    Ok(ForwardCache {
        spans,
        tokens,
        positions,
        layers,
        final_norm,
        hidden,
    })
}

/// Per-layer internals of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<F> {
    /// Residual stream entering the block, `T × d_model`.
    pub input: Array2<F>,
    /// Value vectors, heads concatenated along columns, `T × d_model`.
    pub values: Array2<F>,
    /// One `T × T` row-stochastic causal matrix per head.
    pub attention: Vec<Array2<F>>,
    /// Residual stream leaving the block.
    pub output: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    pub layers: Vec<LayerTrace<F>>,
    pub logits: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    /// `T × vocab_size` next-token logits.
    pub logits: Array2<F>,
    pub trace: Option<ForwardTrace<F>>,
}

pub fn forward<F: Float>(
    params: &Parameters<F>,
    tokens: &[TokenId],
    need_trace: bool,
) -> Result<ForwardOutput<F>> {
    let cache = forward_packed(params, &[tokens])?;
    let logits = cache.hidden.dot(&params.unembedding());
    let trace = need_trace.then(|| ForwardTrace {
        layers: cache
            .layers
            .into_iter()
            .map(|l| LayerTrace {
                input: l.input,
                values: l.v,
                attention: l.probs,
                output: l.output,
            })
            .collect(),
        logits: logits.clone(),
    });
    Ok(ForwardOutput { logits, trace })
}

/// Logits for the token following `tokens`.
pub fn next_token_logits<F: Float>(params: &Parameters<F>, tokens: &[TokenId]) -> Result<Array1<F>> {
    if tokens.is_empty() {
        return Err(LabError::Data("cannot predict from an empty prefix".into()));
    }
    let cache = forward_packed(params, &[tokens])?;
    let last = cache.hidden.row(tokens.len() - 1);
    Ok(last.dot(&params.unembedding()))
}

/// Recomputes block `layer` with the value vector of token `zeroed` set to
/// zero in every head, holding the block input and attention weights fixed.
/// Returns the perturbed outputs for rows `zeroed..T`; earlier rows cannot
/// attend to `zeroed` and are unchanged.
pub fn layer_output_with_zeroed_value<F: Float>(
    layer: &LayerParams<F>,
    config: &ModelConfig,
    trace: &LayerTrace<F>,
    zeroed: usize,
) -> Array2<F> {
    let mut values = trace.values.clone();
    values.row_mut(zeroed).fill(F::zero());
    recompute_block(layer, config, trace, &values, zeroed)
}

/// Block outputs for rows `from..T` given the traced input and attention
/// weights and the supplied value vectors.
fn recompute_block<F: Float>(
    layer: &LayerParams<F>,
    config: &ModelConfig,
    trace: &LayerTrace<F>,
    values: &Array2<F>,
    from: usize,
) -> Array2<F> {
    let t = trace.input.nrows();
    let dh = config.head_dim();
    let mut attn = Array2::zeros((t - from, config.d_model));
    for (h, probs) in trace.attention.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let rows = probs.slice(s![from.., ..]);
        attn.slice_mut(s![.., cols.clone()])
            .assign(&rows.dot(&values.slice(s![.., cols])));
    }
    let input = trace.input.slice(s![from.., ..]);
    let mid = &input + &linear(&attn.view(), &layer.wo, &layer.bo);
    ffn_block(layer, mid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 13,
            max_context: 12,
            seed: 3,
            tie_embeddings: false,
        }
    }

    #[test]
    fn appending_a_token_leaves_earlier_logits_unchanged() {
        let p = Parameters::<f64>::init(&cfg()).unwrap();
        let a = forward(&p, &[1, 4, 7, 2], false).unwrap().logits;
        let b = forward(&p, &[1, 4, 7, 2, 9], false).unwrap().logits;
        for r in 0..4 {
            for c in 0..13 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let p = Parameters::<f64>::init(&cfg()).unwrap();
        let out = forward(&p, &[1, 4, 7, 2, 9, 3], true).unwrap();
        for layer in &out.trace.unwrap().layers {
            for a in &layer.attention {
                for (i, row) in a.outer_iter().enumerate() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert!(row.iter().skip(i + 1).all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn trace_does_not_change_logits() {
        let p = Parameters::<f32>::init(&cfg()).unwrap();
        let a = forward(&p, &[1, 4, 7], true).unwrap();
        let b = forward(&p, &[1, 4, 7], false).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(b.trace.is_none());
        assert_eq!(a.trace.unwrap().logits, a.logits);
    }

    #[test]
    fn overlength_is_rejected() {
        let p = Parameters::<f32>::init(&cfg()).unwrap();
        let long = vec![1; 13];
        assert!(matches!(
            forward(&p, &long, false),
            Err(LabError::Overlength { len: 13, max: 12 })
        ));
        assert!(matches!(forward(&p, &[99], false), Err(LabError::Data(_))));
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let p = Parameters::<f64>::init(&cfg()).unwrap();
        let a: &[TokenId] = &[1, 2, 3];
        let b: &[TokenId] = &[5, 6, 7, 8, 9];
        let packed = forward_packed(&p, &[a, b]).unwrap();
        let single = forward_packed(&p, &[b]).unwrap();
        let diff = &packed.hidden.slice(s![3.., ..]) - &single.hidden;
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn recompute_reproduces_traced_outputs() {
        let p = Parameters::<f64>::init(&cfg()).unwrap();
        let trace = forward(&p, &[1, 4, 7, 2, 9], true).unwrap().trace.unwrap();
        for (l, lt) in trace.layers.iter().enumerate() {
            let again = recompute_block(&p.layers[l], &p.config, lt, &lt.values, 0);
            assert!((&again - &lt.output).iter().all(|d| d.abs() < 1e-12));
            let tail = recompute_block(&p.layers[l], &p.config, lt, &lt.values, 3);
            assert!((&tail - &lt.output.slice(s![3.., ..])).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn zeroing_an_unattended_token_changes_nothing() {
        let p = Parameters::<f64>::init(&cfg()).unwrap();
        let trace = forward(&p, &[1, 4, 7, 2, 9], true).unwrap().trace.unwrap();
        let mut blind = trace.layers[1].clone();
        for a in &mut blind.attention {
            for j in 1..5 {
                let w = a[[j, 0]];
                a[[j, 0]] = 0.0;
                a[[j, j]] += w;
            }
        }
        let kept = recompute_block(&p.layers[1], &p.config, &blind, &blind.values, 0);
        let zeroed = layer_output_with_zeroed_value(&p.layers[1], &p.config, &blind, 0);
        // Row 0 can only attend to itself; every later row ignores token 0.
        let diff = &kept.slice(s![1.., ..]) - &zeroed.slice(s![1.., ..]);
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
        assert!((&kept.row(0) - &zeroed.row(0)).iter().any(|d| d.abs() > 1e-9));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

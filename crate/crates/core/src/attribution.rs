//! Value Zeroing attribution and region-level summaries.
//!
//! For layer `l` and input token `i`, token `i`'s value vector is zeroed in
//! every head, the block is recomputed with its input and attention weights
//! held fixed, and the raw score of `(j, i)` is the distance between the
//! original and perturbed outputs of token `j`. Rows are then normalized.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{layer_output_with_zeroed_value, Float, ForwardTrace, Parameters};
use crate::training::{PromptLayout, Region};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    /// `layers[l][[j, i]]`: share of token `i` in the output of token `j`.
    pub layers: Vec<Array2<f64>>,
    /// Number of cosine distances involving a zero-norm vector; each was
    /// scored 0.
    pub degenerate: usize,
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>, metric: Distance) -> Option<f64> {
    match metric {
        Distance::Euclidean => Some(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        Distance::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return None;
            }
            Some((1.0 - a.dot(&b) / (na * nb)).max(0.0))
        }
    }
}

/// Scales every row with positive mass to sum to 1; zero rows stay zero.
pub fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

pub fn value_zeroing_matrix<F: Float>(
    params: &Parameters<F>,
    tokens: &[TokenId],
    trace: &ForwardTrace<F>,
    metric: Distance,
) -> Result<AttributionMatrix> {
    let cfg = &params.config;
    let t = tokens.len();
    if trace.layers.len() != cfg.n_layers || trace.layers.iter().any(|l| l.input.nrows() != t) {
        return Err(LabError::Data(format!(
            "trace does not match {t} tokens through {} layers",
            cfg.n_layers
        )));
    }
    let mut degenerate = 0;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (layer, lt) in params.layers.iter().zip(&trace.layers) {
        let original = lt.output.mapv(|x| x.as_f64());
        let mut raw = Array2::<f64>::zeros((t, t));
        for i in 0..t {
            let perturbed = layer_output_with_zeroed_value(layer, cfg, lt, i).mapv(|x| x.as_f64());
            for j in i..t {
                raw[[j, i]] = match distance(original.row(j), perturbed.row(j - i), metric) {
                    Some(d) => d,
                    None => {
                        degenerate += 1;
                        0.0
                    }
                };
            }
        }
        normalize_rows(&mut raw);
        layers.push(raw);
    }
    if degenerate > 0 {
        log::warn!("{degenerate} zero-norm representations scored as distance 0");
    }
    Ok(AttributionMatrix { layers, degenerate })
}

/// Shares over the four reported regions. Instruction tokens count as
/// special tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionShares {
    pub speech: f64,
    pub transcription: f64,
    pub translation: f64,
    pub special: f64,
}

impl RegionShares {
    pub const NAMES: [&'static str; 4] = ["speech", "transcription", "translation", "special"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.speech, self.transcription, self.translation, self.special]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        RegionShares {
            speech: a[0],
            transcription: a[1],
            translation: a[2],
            special: a[3],
        }
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }

    fn slot(region: Region) -> usize {
        match region {
            Region::Speech => 0,
            Region::Transcription => 1,
            Region::Translation => 2,
            Region::Special | Region::Instruction => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAttribution {
    pub per_layer: Vec<RegionShares>,
    /// Mean over layers.
    pub mean: RegionShares,
}

/// Averages, over translation tokens with nonzero attribution mass, the
/// summed share of each input region.
pub fn aggregate_regions(matrix: &AttributionMatrix, layout: &PromptLayout) -> Result<RegionAttribution> {
    let outputs: Vec<usize> = layout.positions(Region::Translation).collect();
    if outputs.is_empty() {
        return Err(LabError::Data("layout has no translation span".into()));
    }
    let t = matrix.layers.first().map_or(0, |m| m.nrows());
    if layout.len != t {
        return Err(LabError::Data(format!(
            "layout covers {} tokens but the matrix has {t}",
            layout.len
        )));
    }
    let slots = (0..t)
        .map(|i| {
            layout
                .region_of(i)
                .map(RegionShares::slot)
                .ok_or_else(|| LabError::Data(format!("token {i} has no region")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_layer = Vec::with_capacity(matrix.layers.len());
    for (l, m) in matrix.layers.iter().enumerate() {
        let mut acc = [0.0; 4];
        let mut rows = 0usize;
        for &j in &outputs {
            let row = m.row(j);
            if row.sum() == 0.0 {
                continue;
            }
            rows += 1;
            for (i, &c) in row.iter().enumerate() {
                acc[slots[i]] += c;
            }
        }
        if rows == 0 {
            return Err(LabError::Data(format!(
                "layer {l} has no translation token with attribution mass"
            )));
        }
        per_layer.push(RegionShares::from_array(acc.map(|a| a / rows as f64)));
    }
    let n = per_layer.len() as f64;
    let mut mean = [0.0; 4];
    for s in &per_layer {
        for (m, v) in mean.iter_mut().zip(s.as_array()) {
            *m += v / n;
        }
    }
    Ok(RegionAttribution {
        per_layer,
        mean: RegionShares::from_array(mean),
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: RegionShares,
    pub std: RegionShares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub runs: usize,
    pub per_layer: Vec<LayerStats>,
    /// Cross-layer mean speech share, mean and std over runs.
    pub speech_mean: f64,
    pub speech_std: f64,
}

/// Statistics across runs for every layer and region.
pub fn layer_summary(runs: &[RegionAttribution]) -> Result<LayerSummary> {
    let first = runs
        .first()
        .ok_or_else(|| LabError::Data("layer summary needs at least one run".into()))?;
    let n_layers = first.per_layer.len();
    if runs.iter().any(|r| r.per_layer.len() != n_layers) {
        return Err(LabError::Data("runs disagree on layer count".into()));
    }
    let per_layer = (0..n_layers)
        .map(|l| {
            let mut mean = [0.0; 4];
            let mut std = [0.0; 4];
            for k in 0..4 {
                let vals: Vec<f64> = runs.iter().map(|r| r.per_layer[l].as_array()[k]).collect();
                (mean[k], std[k]) = mean_std(&vals);
            }
            LayerStats {
                mean: RegionShares::from_array(mean),
                std: RegionShares::from_array(std),
            }
        })
        .collect();
    let speech: Vec<f64> = runs.iter().map(|r| r.mean.speech).collect();
    let (speech_mean, speech_std) = mean_std(&speech);
    Ok(LayerSummary {
        runs: runs.len(),
        per_layer,
        speech_mean,
        speech_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::vocab::Vocabulary;
    use crate::training::PromptBuilder;

    fn setup() -> (Parameters<f64>, Vocabulary, crate::training::FormattedPrompt) {
        let vocab = Vocabulary {
            n_languages: 1,
            n_units: 9,
            n_words: 5,
            target_size: 5,
        };
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: vocab.size(),
            max_context: 32,
            seed: 2,
            tie_embeddings: false,
        };
        let mut b = PromptBuilder::new(&vocab);
        let instr = b.transcribe_instruction();
        b.user_turn(Region::Speech, &vocab.units_to_tokens(&[1, 2, 8, 3]), &instr);
        b.open_assistant();
        b.assistant_content(Region::Transcription, &vocab.words_to_tokens(&[0, 4]), 0.0);
        b.close_assistant(0.0);
        let instr = b.translate_instruction(0);
        b.user_turn(Region::Speech, &[], &instr);
        b.open_assistant();
        b.assistant_content(Region::Translation, &vocab.targets_to_tokens(0, &[3, 1]), 0.0);
        let prompt = b.finish();
        (Parameters::init(&cfg).unwrap(), vocab, prompt)
    }

    #[test]
    fn matrix_is_causal_nonnegative_and_normalized() {
        let (params, _, prompt) = setup();
        let trace = forward(&params, &prompt.tokens, true).unwrap().trace.unwrap();
        for metric in [Distance::Cosine, Distance::Euclidean] {
            let m = value_zeroing_matrix(&params, &prompt.tokens, &trace, metric).unwrap();
            assert_eq!(m.degenerate, 0);
            for layer in &m.layers {
                for (j, row) in layer.outer_iter().enumerate() {
                    assert!(row.iter().all(|&c| c >= 0.0));
                    assert!(row.iter().skip(j + 1).all(|&c| c == 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-8);
                }
            }
            let again = value_zeroing_matrix(&params, &prompt.tokens, &trace, metric).unwrap();
            assert_eq!(m, again);
        }
    }

    #[test]
    fn region_shares_sum_to_one_and_respect_additivity() {
        let (params, _, prompt) = setup();
        let trace = forward(&params, &prompt.tokens, true).unwrap().trace.unwrap();
        let m = value_zeroing_matrix(&params, &prompt.tokens, &trace, Distance::Cosine).unwrap();
        let agg = aggregate_regions(&m, &prompt.layout).unwrap();
        for s in &agg.per_layer {
            assert!((s.sum() - 1.0).abs() < 1e-6);
        }
        assert!(agg.mean.speech > 0.0 && agg.mean.transcription > 0.0);

        // Splitting the speech interval in two changes nothing.
        let mut split = prompt.layout.clone();
        let speech = split.spans.get_mut(&Region::Speech).unwrap();
        let r = speech[0].clone();
        speech[0] = r.start..r.start + 2;
        speech.insert(1, r.start + 2..r.end);
        assert_eq!(aggregate_regions(&m, &split).unwrap(), agg);

        // Everything labeled speech except the output span.
        let mut all = PromptLayout::default();
        let tl = prompt.layout.region(Region::Translation)[0].clone();
        all.mark(Region::Speech, 0..tl.start);
        all.mark(Region::Translation, tl.clone());
        all.len = prompt.layout.len;
        let agg = aggregate_regions(&m, &all).unwrap();
        for s in &agg.per_layer {
            assert!((s.speech + s.translation - 1.0).abs() < 1e-12);
        }

        let mut no_out = prompt.layout.clone();
        no_out.spans.remove(&Region::Translation);
        assert!(aggregate_regions(&m, &no_out).is_err());
    }

    #[test]
    fn summary_statistics() {
        let run = |s: f64| RegionAttribution {
            per_layer: vec![
                RegionShares {
                    speech: s,
                    transcription: 0.5 - s,
                    translation: 0.4,
                    special: 0.1,
                };
                2
            ],
            mean: RegionShares {
                speech: s,
                transcription: 0.5 - s,
                translation: 0.4,
                special: 0.1,
            },
        };
        let one = layer_summary(&[run(0.2)]).unwrap();
        assert!(one.per_layer.iter().all(|l| l.std.as_array() == [0.0; 4]));
        let dup = layer_summary(&[run(0.2), run(0.2)]).unwrap();
        assert_eq!(dup.per_layer, one.per_layer);
        let two = layer_summary(&[run(0.1), run(0.3)]).unwrap();
        assert!((two.speech_mean - 0.2).abs() < 1e-12);
        assert!((two.speech_std - 0.1).abs() < 1e-12);
        assert!(layer_summary(&[]).is_err());
    }
}

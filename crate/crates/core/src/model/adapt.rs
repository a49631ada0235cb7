use serde::{Deserialize, Serialize};

use super::optim::{AdamSettings, AdamW};
use super::{gradients, is_embedding_tensor, Float, Parameters, TrainExample};
use crate::error::{LabError, Result};
use crate::vocab::TokenId;

#[derive(Clone, Debug)]
pub struct AdaptOutcome<F> {
    pub params: Parameters<F>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Next-token training on unit-only token streams that updates the token
/// embedding and output projection and nothing else. Streams are visited
/// cyclically in the given order and truncated to the context window.
pub fn adapt_embeddings<F: Float>(
    params: &Parameters<F>,
    unit_streams: &[Vec<TokenId>],
    settings: &AdaptSettings,
) -> Result<AdaptOutcome<F>> {
    let mut params = params.clone();
    if settings.steps == 0 {
        return Ok(AdaptOutcome {
            params,
            losses: Vec::new(),
        });
    }
    if unit_streams.iter().all(|s| s.len() < 2) {
        return Err(LabError::Data(
            "embedding adaptation needs at least one stream of two or more tokens".into(),
        ));
    }
    let usable: Vec<&Vec<TokenId>> = unit_streams.iter().filter(|s| s.len() >= 2).collect();
    let max_len = params.config.max_context + 1;
    let mut optimizer = AdamW::new(
        &params,
        AdamSettings {
            weight_decay: 0.0,
            ..AdamSettings::default()
        },
    );
    let mut losses = Vec::with_capacity(settings.steps);
    let mut cursor = 0usize;
    for _ in 0..settings.steps {
        let batch: Vec<TrainExample> = (0..settings.batch_size.max(1))
            .map(|_| {
                let s = usable[cursor % usable.len()];
                cursor += 1;
                let s = &s[..s.len().min(max_len)];
                TrainExample {
                    tokens: s[..s.len() - 1].to_vec(),
                    targets: s[1..].to_vec(),
                    weights: vec![1.0; s.len() - 1],
                }
            })
            .collect();
        let (grad, loss) = gradients(&params, &batch)?;
        losses.push(loss.value);
        optimizer.step(&mut params, &grad, settings.lr, is_embedding_tensor);
    }
    Ok(AdaptOutcome { params, losses })
}

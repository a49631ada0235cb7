//! Prompt formatting, training mixtures and the optimizer loop.

pub mod corrupt;
pub mod mixture;
pub mod prompt;

pub use corrupt::{corrupt_sample, corrupt_transcript, corruption_span_len, CorruptedTranscript};
pub use mixture::{build_mixture, MixtureItem, MixtureStream};
pub use prompt::{format_prompt, FormattedPrompt, PromptBuilder, PromptLayout, PromptMode, Region};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::optim::{AdamSettings, AdamW};
use crate::model::{gradients, Parameters, TrainExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Dual,
    Noisy,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Dual, Variant::Noisy];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Dual => "dual",
            Variant::Noisy => "noisy",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub final_lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            peak_lr: 3e-4,
            warmup_fraction: 0.1,
            final_lr: 3e-5,
            clip_norm: 1.0,
            batch_size: 64,
            steps: 3000,
            seed: 0,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecipe {
    pub variant: Variant,
    /// Share of S2TT samples formatted as CoT; the rest are Direct.
    pub cot_fraction: f64,
    /// Share of CoT samples whose transcript is corrupted.
    pub noisy_fraction: f64,
    /// Corruption ratios drawn uniformly for noisy samples.
    pub corruption_ratios: Vec<f64>,
    pub optimizer: OptimizerSettings,
}

impl TrainingRecipe {
    pub fn for_variant(variant: Variant) -> Self {
        let (cot_fraction, noisy_fraction) = match variant {
            Variant::Base => (1.0, 0.0),
            Variant::Dual => (0.25, 0.0),
            Variant::Noisy => (1.0, 0.25),
        };
        TrainingRecipe {
            variant,
            cot_fraction,
            noisy_fraction,
            corruption_ratios: vec![0.025, 0.05, 0.10, 0.15, 0.20, 0.30],
            optimizer: OptimizerSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.cot_fraction) || !unit(self.noisy_fraction) {
            return bad("recipe fractions must lie in [0, 1]".into());
        }
        match self.variant {
            Variant::Base if self.cot_fraction != 1.0 || self.noisy_fraction != 0.0 => {
                return bad("base recipe needs cot_fraction 1 and noisy_fraction 0".into())
            }
            Variant::Dual if self.cot_fraction != 0.25 || self.noisy_fraction != 0.0 => {
                return bad("dual recipe needs cot_fraction 0.25 and noisy_fraction 0".into())
            }
            Variant::Noisy if self.cot_fraction != 1.0 || self.noisy_fraction == 0.0 => {
                return bad("noisy recipe needs cot_fraction 1 and a positive noisy_fraction".into())
            }
            _ => {}
        }
        if self.noisy_fraction > 0.0
            && (self.corruption_ratios.is_empty() || !self.corruption_ratios.iter().all(|&r| unit(r)))
        {
            return bad("corruption ratios must be a nonempty list within [0, 1]".into());
        }
        let o = &self.optimizer;
        if o.steps == 0 || o.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(o.peak_lr > 0.0 && o.final_lr >= 0.0 && o.clip_norm > 0.0 && unit(o.warmup_fraction)) {
            return bad("optimizer rates, clip norm and warmup fraction are out of range".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak over the first `warmup_fraction` of the
/// steps, then cosine decay reaching `final_lr` at the last step.
pub fn learning_rate(step: usize, settings: &OptimizerSettings) -> f64 {
    let total = settings.steps;
    let warmup = (settings.warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        return settings.peak_lr * step as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    if last <= warmup {
        return settings.peak_lr;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    settings.final_lr + (settings.peak_lr - settings.final_lr) * cosine
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Optimizer loop state; checkpoints capture it completely.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: Parameters<f32>,
    pub optimizer: AdamW<f32>,
    pub step: usize,
    pub recipe: TrainingRecipe,
}

impl Trainer {
    pub fn new(params: Parameters<f32>, recipe: &TrainingRecipe) -> Result<Self> {
        recipe.validate()?;
        let settings = AdamSettings {
            weight_decay: recipe.optimizer.weight_decay,
            ..AdamSettings::default()
        };
        Ok(Trainer {
            optimizer: AdamW::new(&params, settings),
            params,
            step: 0,
            recipe: recipe.clone(),
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, recipe: &TrainingRecipe) -> Result<Self> {
        recipe.validate()?;
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| LabError::Config("checkpoint has no optimizer state to resume".into()))?;
        Ok(Trainer {
            params: checkpoint.params,
            optimizer,
            step: checkpoint.step,
            recipe: recipe.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.recipe.optimizer.steps
    }

    /// Runs one optimizer step on the next batch of `stream`.
    pub fn step_once(&mut self, stream: &mut MixtureStream<'_>) -> Result<StepMetrics> {
        let o = &self.recipe.optimizer;
        let batch: Vec<TrainExample> = (0..o.batch_size)
            .map(|_| stream.next_item().map(|it| it.prompt.to_example()))
            .collect::<Result<_>>()?;
        let (mut grad, loss) = gradients(&self.params, &batch)?;
        if !loss.value.is_finite() {
            return Err(LabError::Divergence {
                step: self.step,
                loss: loss.value,
            });
        }
        let grad_norm = grad.global_norm();
        if !grad_norm.is_finite() {
            return Err(LabError::Divergence {
                step: self.step,
                loss: grad_norm,
            });
        }
        if grad_norm > o.clip_norm {
            grad.scale((o.clip_norm / grad_norm) as f32);
        }
        let lr = learning_rate(self.step, o);
        self.optimizer.step(&mut self.params, &grad, lr, |_| true);
        if !self.params.all_finite() {
            return Err(LabError::Divergence {
                step: self.step,
                loss: loss.value,
            });
        }
        let metrics = StepMetrics {
            step: self.step,
            loss: loss.value,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Steps until the recipe's budget is spent, reporting each step.
    pub fn run(
        &mut self,
        stream: &mut MixtureStream<'_>,
        mut observer: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        while !self.finished() {
            let m = self.step_once(stream)?;
            if m.step % 100 == 0 {
                log::debug!("step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
            }
            observer(&m);
            history.push(m);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub history: Vec<StepMetrics>,
}

/// Trains from scratch state on `stream` for the recipe's full budget.
pub fn train(
    params: Parameters<f32>,
    stream: &mut MixtureStream<'_>,
    recipe: &TrainingRecipe,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(params, recipe)?;
    let history = trainer.run(stream, |_| {})?;
    Ok(TrainOutcome {
        params: trainer.params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthworld::{build_lexicon, make_corpus, CorpusSizes, Lexicon, LexiconSettings, Sample};
    use crate::vocab::Vocabulary;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints() {
        let s = OptimizerSettings::default();
        assert_eq!(learning_rate(0, &s), 0.0);
        assert_abs_diff_eq!(learning_rate(300, &s), s.peak_lr, epsilon = 1e-15);
        assert_abs_diff_eq!(learning_rate(150, &s), s.peak_lr / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(learning_rate(2999, &s), s.final_lr, epsilon = 1e-15);
        let mid = learning_rate(1650, &s);
        assert!(mid < s.peak_lr && mid > s.final_lr);
        for step in 300..2999 {
            assert!(learning_rate(step + 1, &s) <= learning_rate(step, &s));
        }
    }

    #[test]
    fn recipe_invariants() {
        for v in Variant::ALL {
            TrainingRecipe::for_variant(v).validate().unwrap();
        }
        let mut r = TrainingRecipe::for_variant(Variant::Dual);
        r.cot_fraction = 0.5;
        assert!(r.validate().is_err());
        let mut r = TrainingRecipe::for_variant(Variant::Base);
        r.noisy_fraction = 0.1;
        assert!(r.validate().is_err());
        let mut r = TrainingRecipe::for_variant(Variant::Noisy);
        r.corruption_ratios = vec![1.5];
        assert!(r.validate().is_err());
        assert_eq!("noisy".parse::<Variant>().unwrap(), Variant::Noisy);
        assert!("other".parse::<Variant>().is_err());
    }

    fn tiny() -> (Lexicon, Vocabulary, Vec<Sample>, ModelConfig, TrainingRecipe) {
        let lex = build_lexicon(
            5,
            &LexiconSettings {
                n_words: 12,
                n_ambiguous: 2,
                n_languages: 2,
                n_units: 40,
            },
        )
        .unwrap();
        let vocab = Vocabulary::for_lexicon(&lex);
        let sizes = CorpusSizes {
            s2tt: 30,
            asr: 10,
            t2tt: 10,
            test: 5,
        };
        let corpus = make_corpus(&lex, 6, &sizes, (2, 3), 0.5).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab.size(),
            max_context: 48,
            seed: 7,
            tie_embeddings: false,
        };
        let mut recipe = TrainingRecipe::for_variant(Variant::Noisy);
        recipe.optimizer.steps = 12;
        recipe.optimizer.batch_size = 4;
        recipe.optimizer.peak_lr = 3e-3;
        (lex, vocab, corpus.train, cfg, recipe)
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let (lex, vocab, train_set, cfg, recipe) = tiny();
        let run = || {
            let mut stream = build_mixture(&train_set, &vocab, &lex, &recipe).unwrap();
            train(Parameters::init(&cfg).unwrap(), &mut stream, &recipe).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 12);
        assert!(a.history.last().unwrap().loss < a.history[0].loss);

        // Stop halfway, round-trip a checkpoint, resume on a re-seeded stream.
        let mut stream = build_mixture(&train_set, &vocab, &lex, &recipe).unwrap();
        let mut first = Trainer::new(Parameters::init(&cfg).unwrap(), &recipe).unwrap();
        for _ in 0..5 {
            first.step_once(&mut stream).unwrap();
        }
        let bytes = first.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let mut resumed = Trainer::from_checkpoint(ck, &recipe).unwrap();
        let mut stream = build_mixture(&train_set, &vocab, &lex, &recipe).unwrap();
        stream
            .skip_items((resumed.step * recipe.optimizer.batch_size) as u64)
            .unwrap();
        let rest = resumed.run(&mut stream, |_| {}).unwrap();
        assert_eq!(rest, a.history[5..].to_vec());
        assert_eq!(resumed.params, a.params);
    }

    #[test]
    fn divergence_is_reported() {
        let (lex, vocab, train_set, cfg, recipe) = tiny();
        let mut params = Parameters::<f32>::init(&cfg).unwrap();
        params.token_embedding[[0, 0]] = f32::NAN;
        let mut stream = build_mixture(&train_set, &vocab, &lex, &recipe).unwrap();
        let err = train(params, &mut stream, &recipe).unwrap_err();
        assert!(matches!(err, LabError::Divergence { step: 0, .. }), "{err}");
    }
}

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::corrupt::corrupt_sample;
use super::prompt::{format_prompt, FormattedPrompt, PromptMode};
use super::TrainingRecipe;
use crate::error::{LabError, Result};
use crate::synthworld::{stream_rng, Lexicon, Sample, SampleFormat};
use crate::vocab::Vocabulary;

const STREAM_MIXTURE: u64 = 0x3177;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureItem {
    pub prompt: FormattedPrompt,
    pub format: SampleFormat,
    pub corruption_ratio: Option<f64>,
}

/// Endless, seeded stream over the training corpus. Each epoch visits every
/// sample once in a fresh order; S2TT samples get their format drawn anew on
/// every visit.
#[derive(Clone, Debug)]
pub struct MixtureStream<'a> {
    corpus: &'a [Sample],
    vocab: &'a Vocabulary,
    lexicon: &'a Lexicon,
    recipe: TrainingRecipe,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    drawn: u64,
}

pub fn build_mixture<'a>(
    corpus: &'a [Sample],
    vocab: &'a Vocabulary,
    lexicon: &'a Lexicon,
    recipe: &TrainingRecipe,
) -> Result<MixtureStream<'a>> {
    if corpus.is_empty() {
        return Err(LabError::Data("training corpus is empty".into()));
    }
    recipe.validate()?;
    Ok(MixtureStream {
        corpus,
        vocab,
        lexicon,
        recipe: recipe.clone(),
        rng: stream_rng(recipe.optimizer.seed, STREAM_MIXTURE),
        order: (0..corpus.len()).collect(),
        cursor: corpus.len(),
        drawn: 0,
    })
}

impl MixtureStream<'_> {
    /// Items produced so far.
    pub fn position(&self) -> u64 {
        self.drawn
    }

    /// Draws and discards `n` items.
    pub fn skip_items(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.next_item()?;
        }
        Ok(())
    }

    fn s2tt_variant(&mut self, sample: &Sample) -> Result<(Sample, PromptMode)> {
        let r = &self.recipe;
        if self.rng.random::<f64>() >= r.cot_fraction {
            let direct = Sample {
                format: SampleFormat::Direct,
                corruption: None,
                ..sample.clone()
            };
            return Ok((direct, PromptMode::Direct));
        }
        if r.noisy_fraction > 0.0 && self.rng.random::<f64>() < r.noisy_fraction {
            let ratio = *r
                .corruption_ratios
                .choose(&mut self.rng)
                .expect("validated nonempty");
            let noisy = corrupt_sample(sample, ratio, &mut self.rng, self.lexicon)?;
            return Ok((noisy, PromptMode::Cot));
        }
        let cot = Sample {
            format: SampleFormat::Cot,
            corruption: None,
            ..sample.clone()
        };
        Ok((cot, PromptMode::Cot))
    }

    pub fn next_item(&mut self) -> Result<MixtureItem> {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let sample = &self.corpus[self.order[self.cursor]];
        self.cursor += 1;
        self.drawn += 1;
        let (sample, mode) = match sample.format {
            f if f.is_s2tt() => self.s2tt_variant(sample)?,
            SampleFormat::Asr => (sample.clone(), PromptMode::Asr),
            _ => (sample.clone(), PromptMode::T2tt),
        };
        Ok(MixtureItem {
            prompt: format_prompt(self.vocab, &sample, mode)?,
            format: sample.format,
            corruption_ratio: sample.corruption.map(|c| c.ratio),
        })
    }
}

impl Iterator for MixtureStream<'_> {
    type Item = Result<MixtureItem>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_item())
    }
}

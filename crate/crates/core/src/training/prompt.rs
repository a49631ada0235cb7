//! Chat-style prompt construction with region labels and loss masks.
//!
//! Layouts (`U` = user, `A` = assistant, `E` = end of turn):
//!
//! ```text
//! cot     BOS U units TRANSCRIBE E A transcript E U TRANSLATE lang E A translation E
//! direct  BOS U units TRANSLATE lang E A translation E
//! asr     BOS U units TRANSCRIBE E A transcript E
//! t2tt    BOS U transcript TRANSLATE lang E A translation E
//! ```
//!
//! The loss mask is nonzero only on assistant output tokens, including the
//! end-of-turn token that closes each assistant turn.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::synthworld::{LangId, Sample, SampleFormat};
use crate::vocab::{TokenId, Vocabulary, ASSISTANT, BOS, END_OF_TURN, TRANSCRIBE, TRANSLATE, USER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Speech,
    Instruction,
    Transcription,
    Translation,
    Special,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Speech,
        Region::Instruction,
        Region::Transcription,
        Region::Translation,
        Region::Special,
    ];
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    /// Disjoint token-index intervals per region; adjacent intervals of the
    /// same region are merged.
    pub spans: BTreeMap<Region, Vec<Range<usize>>>,
    /// Assistant turns, each covering the output tokens and the closing
    /// end-of-turn token.
    pub assistant_turns: Vec<Range<usize>>,
    /// Index of the first token produced by the final assistant turn.
    pub generation_start: usize,
    pub len: usize,
}

impl PromptLayout {
    pub fn region(&self, region: Region) -> &[Range<usize>] {
        self.spans.get(&region).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has(&self, region: Region) -> bool {
        !self.region(region).is_empty()
    }

    pub fn region_of(&self, pos: usize) -> Option<Region> {
        self.spans
            .iter()
            .find(|(_, rs)| rs.iter().any(|r| r.contains(&pos)))
            .map(|(&reg, _)| reg)
    }

    pub fn positions(&self, region: Region) -> impl Iterator<Item = usize> + '_ {
        self.region(region).iter().flat_map(|r| r.clone())
    }

    /// Labels `range` with `region`, merging with an adjacent interval.
    pub fn mark(&mut self, region: Region, range: Range<usize>) {
        if range.is_empty() {
            return;
        }
        self.len = self.len.max(range.end);
        let list = self.spans.entry(region).or_default();
        match list.last_mut() {
            Some(last) if last.end == range.start => last.end = range.end,
            _ => list.push(range),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormattedPrompt {
    pub tokens: Vec<TokenId>,
    pub layout: PromptLayout,
    /// Per-token loss weight: `mask[t]` weighs predicting `tokens[t]`.
    pub mask: Vec<f64>,
}

impl FormattedPrompt {
    /// Shifts into next-token training form.
    pub fn to_example(&self) -> crate::model::TrainExample {
        let n = self.tokens.len();
        crate::model::TrainExample {
            tokens: self.tokens[..n - 1].to_vec(),
            targets: self.tokens[1..].to_vec(),
            weights: self.mask[1..].to_vec(),
        }
    }
}

/// Incremental prompt writer shared by training and inference.
#[derive(Clone, Debug)]
pub struct PromptBuilder<'v> {
    vocab: &'v Vocabulary,
    tokens: Vec<TokenId>,
    mask: Vec<f64>,
    layout: PromptLayout,
    open_turn: Option<usize>,
}

impl<'v> PromptBuilder<'v> {
    pub fn new(vocab: &'v Vocabulary) -> Self {
        let mut b = PromptBuilder {
            vocab,
            tokens: Vec::new(),
            mask: Vec::new(),
            layout: PromptLayout::default(),
            open_turn: None,
        };
        b.push(Region::Special, &[BOS], 0.0);
        b
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn push(&mut self, region: Region, tokens: &[TokenId], weight: f64) {
        let start = self.tokens.len();
        self.tokens.extend_from_slice(tokens);
        self.mask.extend(std::iter::repeat_n(weight, tokens.len()));
        self.layout.mark(region, start..self.tokens.len());
    }

    pub fn transcribe_instruction(&self) -> Vec<TokenId> {
        vec![TRANSCRIBE]
    }

    pub fn translate_instruction(&self, lang: LangId) -> Vec<TokenId> {
        vec![TRANSLATE, self.vocab.language_tag(lang)]
    }

    /// `U content instruction E`
    pub fn user_turn(&mut self, region: Region, content: &[TokenId], instruction: &[TokenId]) {
        self.push(Region::Special, &[USER], 0.0);
        self.push(region, content, 0.0);
        self.push(Region::Instruction, instruction, 0.0);
        self.push(Region::Special, &[END_OF_TURN], 0.0);
    }

    /// Emits the assistant header; the next token is the first one generated.
    pub fn open_assistant(&mut self) {
        self.push(Region::Special, &[ASSISTANT], 0.0);
        self.open_turn = Some(self.tokens.len());
        self.layout.generation_start = self.tokens.len();
    }

    pub fn assistant_content(&mut self, region: Region, content: &[TokenId], weight: f64) {
        self.push(region, content, weight);
    }

    pub fn close_assistant(&mut self, weight: f64) {
        self.push(Region::Special, &[END_OF_TURN], weight);
        if let Some(start) = self.open_turn.take() {
            self.layout.assistant_turns.push(start..self.tokens.len());
        }
    }

    pub fn finish(self) -> FormattedPrompt {
        let mut layout = self.layout;
        layout.len = self.tokens.len();
        FormattedPrompt {
            tokens: self.tokens,
            layout,
            mask: self.mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Cot,
    Direct,
    Asr,
    T2tt,
}

fn mismatch(mode: PromptMode, sample: &Sample, what: &str) -> LabError {
    LabError::Data(format!(
        "cannot format a {} sample in {mode:?} mode: {what}",
        sample.format.as_str()
    ))
}

/// Formats a training sample. `noisy_cot` samples get zero weight on the
/// transcription turn.
pub fn format_prompt(vocab: &Vocabulary, sample: &Sample, mode: PromptMode) -> Result<FormattedPrompt> {
    let compatible = matches!(
        (mode, sample.format),
        (PromptMode::Cot, SampleFormat::Cot | SampleFormat::NoisyCot)
            | (PromptMode::Direct, SampleFormat::Direct)
            | (PromptMode::Asr, SampleFormat::Asr)
            | (PromptMode::T2tt, SampleFormat::T2tt)
    );
    if !compatible {
        return Err(mismatch(mode, sample, "format does not match"));
    }
    let needs_units = matches!(mode, PromptMode::Cot | PromptMode::Direct | PromptMode::Asr);
    let needs_transcript = matches!(mode, PromptMode::Cot | PromptMode::Asr | PromptMode::T2tt);
    let needs_translation = matches!(mode, PromptMode::Cot | PromptMode::Direct | PromptMode::T2tt);
    if needs_units && sample.units.is_empty() {
        return Err(mismatch(mode, sample, "no speech units"));
    }
    if needs_transcript && sample.transcript.is_empty() {
        return Err(mismatch(mode, sample, "no transcript"));
    }
    if needs_translation && sample.translation.is_empty() {
        return Err(mismatch(mode, sample, "no translation"));
    }
    if sample.target_language as usize >= vocab.n_languages {
        return Err(mismatch(mode, sample, "unknown target language"));
    }

    let lang = sample.target_language;
    let units = vocab.units_to_tokens(sample.units.as_slice());
    let transcript = vocab.words_to_tokens(&sample.transcript);
    let translation = vocab.targets_to_tokens(lang, &sample.translation);
    let transcript_weight = if sample.format == SampleFormat::NoisyCot { 0.0 } else { 1.0 };

    let mut b = PromptBuilder::new(vocab);
    match mode {
        PromptMode::Cot => {
            let instr = b.transcribe_instruction();
            b.user_turn(Region::Speech, &units, &instr);
            b.open_assistant();
            b.assistant_content(Region::Transcription, &transcript, transcript_weight);
            b.close_assistant(transcript_weight);
            let instr = b.translate_instruction(lang);
            b.user_turn(Region::Speech, &[], &instr);
            b.open_assistant();
            b.assistant_content(Region::Translation, &translation, 1.0);
            b.close_assistant(1.0);
        }
        PromptMode::Direct => {
            let instr = b.translate_instruction(lang);
            b.user_turn(Region::Speech, &units, &instr);
            b.open_assistant();
            b.assistant_content(Region::Translation, &translation, 1.0);
            b.close_assistant(1.0);
        }
        PromptMode::Asr => {
            let instr = b.transcribe_instruction();
            b.user_turn(Region::Speech, &units, &instr);
            b.open_assistant();
            b.assistant_content(Region::Transcription, &transcript, 1.0);
            b.close_assistant(1.0);
        }
        PromptMode::T2tt => {
            let instr = b.translate_instruction(lang);
            b.user_turn(Region::Transcription, &transcript, &instr);
            b.open_assistant();
            b.assistant_content(Region::Translation, &translation, 1.0);
            b.close_assistant(1.0);
        }
    }
    Ok(b.finish())
}

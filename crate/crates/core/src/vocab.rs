//! Flat token-id layout shared by the model, the prompt builder and the
//! decoders: special tokens, instruction tokens, speech units, source words,
//! then one block of target tokens per language.

use serde::{Deserialize, Serialize};

use crate::synthworld::{LangId, Lexicon, TargetId, UnitId, WordId};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const USER: TokenId = 1;
pub const ASSISTANT: TokenId = 2;
/// Closes every user and assistant turn; generation stops on it.
pub const END_OF_TURN: TokenId = 3;
pub const TRANSCRIBE: TokenId = 4;
pub const TRANSLATE: TokenId = 5;
const FIRST_LANGUAGE_TAG: TokenId = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special,
    Instruction,
    Unit(UnitId),
    Word(WordId),
    Target(LangId, TargetId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_languages: usize,
    /// Unit ids including the emphasis unit.
    pub n_units: usize,
    pub n_words: usize,
    pub target_size: usize,
}

impl Vocabulary {
    pub fn for_lexicon(lexicon: &Lexicon) -> Self {
        Vocabulary {
            n_languages: lexicon.n_languages(),
            n_units: lexicon.n_units + 1,
            n_words: lexicon.n_words(),
            target_size: lexicon.target_vocab_size(),
        }
    }

    pub fn n_special(&self) -> usize {
        FIRST_LANGUAGE_TAG as usize + self.n_languages
    }

    pub fn language_tag(&self, lang: LangId) -> TokenId {
        FIRST_LANGUAGE_TAG + lang
    }

    fn unit_base(&self) -> TokenId {
        self.n_special() as TokenId
    }

    fn word_base(&self) -> TokenId {
        self.unit_base() + self.n_units as TokenId
    }

    fn target_base(&self, lang: LangId) -> TokenId {
        self.word_base() + self.n_words as TokenId + lang * self.target_size as TokenId
    }

    pub fn size(&self) -> usize {
        self.target_base(self.n_languages as LangId) as usize
    }

    pub fn unit(&self, u: UnitId) -> TokenId {
        self.unit_base() + u
    }

    pub fn word(&self, w: WordId) -> TokenId {
        self.word_base() + w
    }

    pub fn target(&self, lang: LangId, t: TargetId) -> TokenId {
        self.target_base(lang) + t
    }

    pub fn classify(&self, token: TokenId) -> Option<TokenClass> {
        let t = token;
        if (t as usize) >= self.size() {
            return None;
        }
        Some(if t < FIRST_LANGUAGE_TAG {
            if t == TRANSCRIBE || t == TRANSLATE {
                TokenClass::Instruction
            } else {
                TokenClass::Special
            }
        } else if t < self.unit_base() {
            TokenClass::Instruction
        } else if t < self.word_base() {
            TokenClass::Unit(t - self.unit_base())
        } else if t < self.target_base(0) {
            TokenClass::Word(t - self.word_base())
        } else {
            let offset = t - self.target_base(0);
            let size = self.target_size as TokenId;
            TokenClass::Target(offset / size, offset % size)
        })
    }

    pub fn is_unit(&self, token: TokenId) -> bool {
        matches!(self.classify(token), Some(TokenClass::Unit(_)))
    }

    pub fn words_to_tokens(&self, words: &[WordId]) -> Vec<TokenId> {
        words.iter().map(|&w| self.word(w)).collect()
    }

    pub fn units_to_tokens(&self, units: &[UnitId]) -> Vec<TokenId> {
        units.iter().map(|&u| self.unit(u)).collect()
    }

    pub fn targets_to_tokens(&self, lang: LangId, targets: &[TargetId]) -> Vec<TokenId> {
        targets.iter().map(|&t| self.target(lang, t)).collect()
    }

    /// Maps generated tokens back to source words; tokens of any other class
    /// are dropped.
    pub fn tokens_to_words(&self, tokens: &[TokenId]) -> Vec<WordId> {
        tokens
            .iter()
            .filter_map(|&t| match self.classify(t) {
                Some(TokenClass::Word(w)) => Some(w),
                _ => None,
            })
            .collect()
    }

    /// Maps generated tokens back to target ids of `lang`; anything else
    /// (other languages, units, words) becomes `None`.
    pub fn tokens_to_targets(&self, lang: LangId, tokens: &[TokenId]) -> Vec<Option<TargetId>> {
        tokens
            .iter()
            .map(|&t| match self.classify(t) {
                Some(TokenClass::Target(l, id)) if l == lang => Some(id),
                _ => None,
            })
            .collect()
    }
}

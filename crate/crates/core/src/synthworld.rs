//! Deterministic synthetic speech-translation micro-world.
//!
//! A [`Lexicon`] fixes a set of source words, a discrete "speech unit"
//! rendering for each word, and per-language translations. A subset of the
//! words is ambiguous: it has two translation senses, and the second sense is
//! selected only by prosodic emphasis, which is visible in the unit stream
//! (a reserved emphasis unit after the word) but never in the transcript.
//!
//! Every generator takes an explicit seed; nothing here depends on global
//! state or scheduling.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type WordId = u32;
pub type UnitId = u32;
pub type LangId = u32;
/// Index into a target language's token inventory.
pub type TargetId = u32;

const STREAM_LEXICON: u64 = 0x1e71;
const STREAM_CORPUS: u64 = 0xc0de;
const STREAM_PAIRS: u64 = 0x9a12;

/// Seeded generator for one named stream. Distinct streams with the same seed
/// are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconSettings {
    pub n_words: usize,
    pub n_ambiguous: usize,
    pub n_languages: usize,
    /// Size of the unit inventory, excluding the reserved emphasis unit.
    pub n_units: usize,
}

impl Default for LexiconSettings {
    fn default() -> Self {
        LexiconSettings {
            n_words: 48,
            n_ambiguous: 8,
            n_languages: 2,
            n_units: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub seed: u64,
    pub n_units: usize,
    pub content_words: Vec<WordId>,
    pub ambiguous_subset: BTreeSet<WordId>,
    /// `unit_rendering[w]` is the unit string spoken for word `w`.
    pub unit_rendering: Vec<Vec<UnitId>>,
    /// `translations[lang][w] = [sense0, sense1]`.
    pub translations: Vec<Vec<[TargetId; 2]>>,
    /// Reserved unit id (`== n_units`) marking emphasis on the preceding word.
    pub emphasis_unit: UnitId,
}

impl Lexicon {
    pub fn n_words(&self) -> usize {
        self.content_words.len()
    }

    pub fn n_languages(&self) -> usize {
        self.translations.len()
    }

    pub fn n_ambiguous(&self) -> usize {
        self.ambiguous_subset.len()
    }

    /// Number of distinct target tokens per language (one per word plus one
    /// extra sense per ambiguous word).
    pub fn target_vocab_size(&self) -> usize {
        self.n_words() + self.n_ambiguous()
    }

    pub fn is_ambiguous(&self, word: WordId) -> bool {
        self.ambiguous_subset.contains(&word)
    }

    pub fn translate_word(&self, word: WordId, lang: LangId, sense: usize) -> TargetId {
        self.translations[lang as usize][word as usize][sense]
    }

    /// Checks an utterance against this lexicon.
    pub fn validate(&self, utterance: &Utterance) -> Result<()> {
        if utterance.words.is_empty() {
            return Err(LabError::Data("utterance has no words".into()));
        }
        if let Some(&bad) = utterance
            .words
            .iter()
            .find(|&&w| w as usize >= self.n_words())
        {
            return Err(LabError::Data(format!("unknown word id {bad}")));
        }
        if utterance.target_language as usize >= self.n_languages() {
            return Err(LabError::Data(format!(
                "unknown target language {}",
                utterance.target_language
            )));
        }
        if let Some(idx) = utterance.emphasized_index {
            let Some(&w) = utterance.words.get(idx) else {
                return Err(LabError::Data(format!(
                    "emphasized index {idx} out of range for {} words",
                    utterance.words.len()
                )));
            };
            if !self.is_ambiguous(w) {
                return Err(LabError::Data(format!(
                    "emphasis on word {w}, which is not ambiguous"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub words: Vec<WordId>,
    pub emphasized_index: Option<usize>,
    pub target_language: LangId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitSequence(pub Vec<UnitId>);

impl UnitSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[UnitId] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    Cot,
    Direct,
    NoisyCot,
    Asr,
    T2tt,
}

impl SampleFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleFormat::Cot => "cot",
            SampleFormat::Direct => "direct",
            SampleFormat::NoisyCot => "noisy_cot",
            SampleFormat::Asr => "asr",
            SampleFormat::T2tt => "t2tt",
        }
    }

    pub fn is_s2tt(self) -> bool {
        matches!(
            self,
            SampleFormat::Cot | SampleFormat::Direct | SampleFormat::NoisyCot
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub ratio: f64,
    pub span_start: usize,
    pub span_len: usize,
}

/// One supervised example. `transcript` holds source word ids and
/// `translation` holds target ids of `target_language`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub units: UnitSequence,
    pub transcript: Vec<WordId>,
    pub translation: Vec<TargetId>,
    pub target_language: LangId,
    pub format: SampleFormat,
    pub corruption: Option<Corruption>,
}

/// Two renderings of the same words, one plain and one with emphasis on an
/// ambiguous word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub utterance_a: Utterance,
    pub utterance_b: Utterance,
    pub units_a: UnitSequence,
    pub units_b: UnitSequence,
    pub transcript: Vec<WordId>,
    pub reference_a: Vec<TargetId>,
    pub reference_b: Vec<TargetId>,
}

/// Builds a lexicon.
///
/// Rendering lengths are drawn from {2, 3, 4}. When the unit inventory is
/// large enough every word gets its own units; otherwise renderings share
/// units but are drawn to be prefix-free, so any rendered stream still parses
/// uniquely.
pub fn build_lexicon(seed: u64, settings: &LexiconSettings) -> Result<Lexicon> {
    let LexiconSettings {
        n_words,
        n_ambiguous,
        n_languages,
        n_units,
    } = *settings;
    if n_words == 0 {
        return Err(LabError::Config("n_words must be positive".into()));
    }
    if n_ambiguous == 0 || n_ambiguous > n_words {
        return Err(LabError::Config(format!(
            "n_ambiguous must be in 1..={n_words}, got {n_ambiguous}"
        )));
    }
    if n_languages == 0 {
        return Err(LabError::Config("n_languages must be at least 1".into()));
    }
    if n_units < 2 {
        return Err(LabError::Config("n_units must be at least 2".into()));
    }

    let mut rng = stream_rng(seed, STREAM_LEXICON);
    let lengths: Vec<usize> = (0..n_words).map(|_| rng.random_range(2..=4)).collect();
    let unit_rendering = draw_renderings(&mut rng, &lengths, n_units)?;

    let mut order: Vec<WordId> = (0..n_words as WordId).collect();
    order.shuffle(&mut rng);
    let ambiguous_subset: BTreeSet<WordId> = order[..n_ambiguous].iter().copied().collect();

    let target_size = n_words + n_ambiguous;
    let translations = (0..n_languages)
        .map(|_| {
            let mut perm: Vec<TargetId> = (0..target_size as TargetId).collect();
            perm.shuffle(&mut rng);
            let mut next_extra = n_words;
            (0..n_words as WordId)
                .map(|w| {
                    let sense0 = perm[w as usize];
                    let sense1 = if ambiguous_subset.contains(&w) {
                        let t = perm[next_extra];
                        next_extra += 1;
                        t
                    } else {
                        sense0
                    };
                    [sense0, sense1]
                })
                .collect()
        })
        .collect();

    Ok(Lexicon {
        seed,
        n_units,
        content_words: (0..n_words as WordId).collect(),
        ambiguous_subset,
        unit_rendering,
        translations,
        emphasis_unit: n_units as UnitId,
    })
}

fn draw_renderings(
    rng: &mut ChaCha8Rng,
    lengths: &[usize],
    n_units: usize,
) -> Result<Vec<Vec<UnitId>>> {
    let total: usize = lengths.iter().sum();
    if total <= n_units {
        let mut pool: Vec<UnitId> = (0..n_units as UnitId).collect();
        pool.shuffle(rng);
        let mut out = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &len in lengths {
            out.push(pool[at..at + len].to_vec());
            at += len;
        }
        return Ok(out);
    }

    const MAX_ATTEMPTS: usize = 10_000;
    let mut out: Vec<Vec<UnitId>> = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand: Vec<UnitId> = (0..len)
                .map(|_| rng.random_range(0..n_units as UnitId))
                .collect();
            let clash = out
                .iter()
                .any(|r| r.starts_with(&cand) || cand.starts_with(r));
            if !clash {
                out.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LabError::Config(format!(
                "unit inventory of {n_units} is too small for {} prefix-free renderings",
                lengths.len()
            )));
        }
    }
    Ok(out)
}

/// Concatenates word renderings, inserting the emphasis unit right after the
/// emphasized word.
pub fn render_units(lexicon: &Lexicon, utterance: &Utterance) -> Result<UnitSequence> {
    lexicon.validate(utterance)?;
    let mut units = Vec::new();
    for (pos, &w) in utterance.words.iter().enumerate() {
        units.extend_from_slice(&lexicon.unit_rendering[w as usize]);
        if utterance.emphasized_index == Some(pos) {
            units.push(lexicon.emphasis_unit);
        }
    }
    Ok(UnitSequence(units))
}

/// The transcript drops prosody: one token per word, emphasis ignored.
pub fn transcript_of(lexicon: &Lexicon, utterance: &Utterance) -> Result<Vec<WordId>> {
    lexicon.validate(utterance)?;
    Ok(utterance.words.clone())
}

pub fn reference_translation(lexicon: &Lexicon, utterance: &Utterance) -> Result<Vec<TargetId>> {
    lexicon.validate(utterance)?;
    Ok(utterance
        .words
        .iter()
        .enumerate()
        .map(|(pos, &w)| {
            let sense = usize::from(utterance.emphasized_index == Some(pos));
            lexicon.translate_word(w, utterance.target_language, sense)
        })
        .collect())
}

/// Every way of parsing `units` back into (words, emphasized position) by
/// exhaustive search over the lexicon.
pub fn decode_units(lexicon: &Lexicon, units: &[UnitId]) -> Vec<(Vec<WordId>, Option<usize>)> {
    fn walk(
        lexicon: &Lexicon,
        units: &[UnitId],
        at: usize,
        words: &mut Vec<WordId>,
        emphasis: Option<usize>,
        out: &mut Vec<(Vec<WordId>, Option<usize>)>,
    ) {
        if at == units.len() {
            if !words.is_empty() {
                out.push((words.clone(), emphasis));
            }
            return;
        }
        if units[at] == lexicon.emphasis_unit {
            if !words.is_empty() && emphasis.is_none() {
                walk(lexicon, units, at + 1, words, Some(words.len() - 1), out);
            }
            return;
        }
        for (w, rendering) in lexicon.unit_rendering.iter().enumerate() {
            if units[at..].starts_with(rendering) {
                words.push(w as WordId);
                walk(lexicon, units, at + rendering.len(), words, emphasis, out);
                words.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(lexicon, units, 0, &mut Vec::new(), None, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub s2tt: usize,
    pub asr: usize,
    pub t2tt: usize,
    /// Held-out S2TT items.
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Number of distinct word sequences (no repeated word) with length in
/// `range`, saturating at `usize::MAX`.
pub fn utterance_capacity(n_words: usize, range: (usize, usize)) -> usize {
    let mut total: usize = 0;
    for len in range.0..=range.1 {
        if len > n_words {
            break;
        }
        let perms = (0..len).try_fold(1usize, |acc, k| acc.checked_mul(n_words - k));
        total = match perms {
            Some(p) => total.saturating_add(p),
            None => usize::MAX,
        };
    }
    total
}

struct UtteranceSampler<'a> {
    lexicon: &'a Lexicon,
    length_range: (usize, usize),
    ambiguous: Vec<WordId>,
}

impl<'a> UtteranceSampler<'a> {
    fn new(lexicon: &'a Lexicon, length_range: (usize, usize)) -> Result<Self> {
        let (lo, hi) = length_range;
        if lo == 0 || lo > hi {
            return Err(LabError::Config(format!(
                "invalid length range ({lo}, {hi})"
            )));
        }
        if hi > lexicon.n_words() {
            return Err(LabError::Config(format!(
                "maximum utterance length {hi} exceeds lexicon size {}",
                lexicon.n_words()
            )));
        }
        Ok(UtteranceSampler {
            lexicon,
            length_range,
            ambiguous: lexicon.ambiguous_subset.iter().copied().collect(),
        })
    }

    fn words<R: Rng>(&self, rng: &mut R) -> Vec<WordId> {
        let len = rng.random_range(self.length_range.0..=self.length_range.1);
        let mut words: Vec<WordId> = self.lexicon.content_words.clone();
        let (chosen, _) = words.partial_shuffle(rng, len);
        chosen.to_vec()
    }

    /// Makes sure at least one ambiguous word is present, then picks one
    /// ambiguous position.
    fn emphasize<R: Rng>(&self, rng: &mut R, words: &mut [WordId]) -> usize {
        if !words.iter().any(|w| self.lexicon.is_ambiguous(*w)) {
            let pos = rng.random_range(0..words.len());
            let absent: Vec<WordId> = self
                .ambiguous
                .iter()
                .copied()
                .filter(|w| !words.contains(w))
                .collect();
            words[pos] = *absent
                .choose(rng)
                .expect("an utterance without ambiguous words leaves all of them absent");
        }
        let candidates: Vec<usize> = (0..words.len())
            .filter(|&i| self.lexicon.is_ambiguous(words[i]))
            .collect();
        *candidates.choose(rng).expect("nonempty by construction")
    }

    fn utterance<R: Rng>(&self, rng: &mut R, emphasis_rate: f64, allow_emphasis: bool) -> Utterance {
        let mut words = self.words(rng);
        let emphasized = allow_emphasis && rng.random_bool(emphasis_rate);
        let emphasized_index = emphasized.then(|| self.emphasize(rng, &mut words));
        let target_language = rng.random_range(0..self.lexicon.n_languages() as LangId);
        Utterance {
            words,
            emphasized_index,
            target_language,
        }
    }
}

fn s2tt_sample(lexicon: &Lexicon, utt: &Utterance) -> Result<Sample> {
    Ok(Sample {
        units: render_units(lexicon, utt)?,
        transcript: transcript_of(lexicon, utt)?,
        translation: reference_translation(lexicon, utt)?,
        target_language: utt.target_language,
        format: SampleFormat::Cot,
        corruption: None,
    })
}

/// Generates train and test splits.
///
/// S2TT and test utterances are all distinct word sequences; no training
/// utterance of any task shares its word sequence with a test utterance.
/// T2TT items never carry emphasis since text cannot express it.
pub fn make_corpus(
    lexicon: &Lexicon,
    seed: u64,
    sizes: &CorpusSizes,
    length_range: (usize, usize),
    emphasis_rate: f64,
) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&emphasis_rate) {
        return Err(LabError::Config(format!(
            "emphasis_rate must lie in [0, 1], got {emphasis_rate}"
        )));
    }
    if sizes.s2tt + sizes.asr + sizes.t2tt == 0 {
        return Err(LabError::Config("corpus sizes are all zero".into()));
    }
    let sampler = UtteranceSampler::new(lexicon, length_range)?;
    let capacity = utterance_capacity(lexicon.n_words(), length_range);
    let needed = sizes.s2tt + sizes.test;
    // Leave headroom so rejection sampling terminates quickly and ASR/T2TT
    // items still have sequences outside the test set.
    if needed.saturating_mul(2) > capacity {
        return Err(LabError::Config(format!(
            "{needed} distinct utterances requested but the lexicon only supports {capacity} at lengths {length_range:?}"
        )));
    }

    let mut rng = stream_rng(seed, STREAM_CORPUS);
    let mut seen: HashSet<Vec<WordId>> = HashSet::new();
    let mut draw_unique = |rng: &mut ChaCha8Rng, allow_emphasis: bool| loop {
        let utt = sampler.utterance(rng, emphasis_rate, allow_emphasis);
        if seen.insert(utt.words.clone()) {
            return utt;
        }
    };

    let test_utts: Vec<Utterance> = (0..sizes.test).map(|_| draw_unique(&mut rng, true)).collect();
    let s2tt_utts: Vec<Utterance> = (0..sizes.s2tt).map(|_| draw_unique(&mut rng, true)).collect();
    let test_words: HashSet<&Vec<WordId>> = test_utts.iter().map(|u| &u.words).collect();

    let mut train = Vec::with_capacity(sizes.s2tt + sizes.asr + sizes.t2tt);
    for utt in &s2tt_utts {
        train.push(s2tt_sample(lexicon, utt)?);
    }
    let draw_outside_test = |rng: &mut ChaCha8Rng, allow_emphasis: bool| loop {
        let utt = sampler.utterance(rng, emphasis_rate, allow_emphasis);
        if !test_words.contains(&utt.words) {
            return utt;
        }
    };
    for _ in 0..sizes.asr {
        let utt = draw_outside_test(&mut rng, true);
        train.push(Sample {
            units: render_units(lexicon, &utt)?,
            transcript: transcript_of(lexicon, &utt)?,
            translation: Vec::new(),
            target_language: 0,
            format: SampleFormat::Asr,
            corruption: None,
        });
    }
    for _ in 0..sizes.t2tt {
        let utt = draw_outside_test(&mut rng, false);
        train.push(Sample {
            units: UnitSequence::default(),
            transcript: transcript_of(lexicon, &utt)?,
            translation: reference_translation(lexicon, &utt)?,
            target_language: utt.target_language,
            format: SampleFormat::T2tt,
            corruption: None,
        });
    }
    let test = test_utts
        .iter()
        .map(|u| s2tt_sample(lexicon, u))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { train, test })
}

/// Generates prosody pairs whose word sequences avoid `exclude`. Languages
/// are assigned round-robin.
pub fn make_contrastive_pairs(
    lexicon: &Lexicon,
    seed: u64,
    n_pairs: usize,
    length_range: (usize, usize),
    exclude: &HashSet<Vec<WordId>>,
) -> Result<Vec<ContrastivePair>> {
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if lexicon.n_ambiguous() == 0 {
        return Err(LabError::Config(
            "contrastive pairs need at least one ambiguous word".into(),
        ));
    }
    let sampler = UtteranceSampler::new(lexicon, length_range)?;
    let capacity = utterance_capacity(lexicon.n_words(), length_range);
    if (n_pairs + exclude.len()).saturating_mul(2) > capacity {
        return Err(LabError::Config(format!(
            "{n_pairs} pairs requested but only {capacity} utterances exist at lengths {length_range:?}"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_PAIRS);
    let mut seen: HashSet<Vec<WordId>> = HashSet::new();
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let mut words = sampler.words(&mut rng);
        let emphasized = sampler.emphasize(&mut rng, &mut words);
        if exclude.contains(&words) || !seen.insert(words.clone()) {
            continue;
        }
        let lang = (pairs.len() % lexicon.n_languages()) as LangId;
        let utterance_a = Utterance {
            words: words.clone(),
            emphasized_index: None,
            target_language: lang,
        };
        let utterance_b = Utterance {
            emphasized_index: Some(emphasized),
            ..utterance_a.clone()
        };
        pairs.push(ContrastivePair {
            units_a: render_units(lexicon, &utterance_a)?,
            units_b: render_units(lexicon, &utterance_b)?,
            transcript: transcript_of(lexicon, &utterance_a)?,
            reference_a: reference_translation(lexicon, &utterance_a)?,
            reference_b: reference_translation(lexicon, &utterance_b)?,
            utterance_a,
            utterance_b,
        });
    }
    Ok(pairs)
}

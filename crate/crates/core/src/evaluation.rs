//! Translation quality, corruption robustness and contrastive prosody scores.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::attribution::{aggregate_regions, mean_std, value_zeroing_matrix, Distance, RegionAttribution};
use crate::error::{LabError, Result};
use crate::inference::{RunMode, S2ttSystem, TranslationRun};
use crate::model::{forward, Parameters};
use crate::synthworld::{
    decode_units, reference_translation, stream_rng, ContrastivePair, LangId, Lexicon, Sample, UnitId,
    Utterance, WordId,
};
use crate::training::corrupt_transcript;
use crate::vocab::{TokenId, Vocabulary};

/// Unigram F1 with clipped counts. An empty hypothesis scores 0.
pub fn similarity(hypothesis: &[TokenId], reference: &[TokenId]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in hypothesis {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hypothesis.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn reference_tokens(vocab: &Vocabulary, sample: &Sample) -> Vec<TokenId> {
    vocab.targets_to_tokens(sample.target_language, &sample.translation)
}

fn check_test_set(test: &[Sample]) -> Result<()> {
    if test.is_empty() {
        return Err(LabError::Data("empty test set".into()));
    }
    if let Some(s) = test.iter().find(|s| s.translation.is_empty() || s.units.is_empty()) {
        return Err(LabError::Data(format!(
            "test item without units or reference ({} format)",
            s.format.as_str()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mode: RunMode,
    pub per_language: BTreeMap<LangId, f64>,
    /// Mean over items.
    pub mean: f64,
    pub item_scores: Vec<f64>,
    pub truncated: usize,
}

fn by_language(test: &[Sample], scores: &[f64]) -> BTreeMap<LangId, f64> {
    let mut acc: BTreeMap<LangId, (f64, usize)> = BTreeMap::new();
    for (s, &v) in test.iter().zip(scores) {
        let e = acc.entry(s.target_language).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(l, (sum, n))| (l, sum / n as f64)).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn evaluate_quality<S: S2ttSystem + ?Sized>(system: &S, test: &[Sample], mode: RunMode) -> Result<QualityReport> {
    Ok(evaluate_quality_runs(system, test, mode)?.0)
}

/// Like [`evaluate_quality`], also returning every run in test-set order.
pub fn evaluate_quality_runs<S: S2ttSystem + ?Sized>(
    system: &S,
    test: &[Sample],
    mode: RunMode,
) -> Result<(QualityReport, Vec<TranslationRun>)> {
    check_test_set(test)?;
    let mut item_scores = Vec::with_capacity(test.len());
    let mut runs = Vec::with_capacity(test.len());
    for s in test {
        let run = system.run(mode, s.units.as_slice(), s.target_language)?;
        item_scores.push(similarity(&run.translation, &reference_tokens(system.vocab(), s)));
        runs.push(run);
    }
    let report = QualityReport {
        mode,
        per_language: by_language(test, &item_scores),
        mean: mean(&item_scores),
        truncated: runs.iter().filter(|r| r.truncated).count(),
        item_scores,
    };
    Ok((report, runs))
}

/// Random source for corrupting item `item` at `ratio`; shared by every mode
/// so all strategies see the same corrupted transcripts.
pub fn corruption_rng(seed: u64, item: usize, ratio: f64) -> rand_chacha::ChaCha8Rng {
    let ratio_key = (ratio * 1e6).round() as u64;
    stream_rng(seed, ((item as u64) << 32) | ratio_key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub ratio: f64,
    pub quality: f64,
    /// Quality minus the ratio-0 quality.
    pub delta: f64,
    /// Std of the per-language deltas.
    pub std: f64,
    pub per_language_delta: BTreeMap<LangId, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub mode: RunMode,
    pub points: Vec<RobustnessPoint>,
}

impl RobustnessCurve {
    pub fn at(&self, ratio: f64) -> Option<&RobustnessPoint> {
        self.points.iter().find(|p| p.ratio == ratio)
    }
}

pub const DEFAULT_RATIO_GRID: [f64; 7] = [0.0, 0.025, 0.05, 0.10, 0.15, 0.20, 0.30];

/// Injects seeded corruptions of the gold transcripts through the forced
/// CoT or cascade path and scores against clean references.
pub fn robustness_sweep<S: S2ttSystem + ?Sized>(
    system: &S,
    lexicon: &Lexicon,
    test: &[Sample],
    ratios: &[f64],
    mode: RunMode,
    seed: u64,
) -> Result<RobustnessCurve> {
    check_test_set(test)?;
    if mode == RunMode::Direct {
        return Err(LabError::Config("robustness needs a transcript-conditioned mode".into()));
    }
    if !ratios.contains(&0.0) {
        return Err(LabError::Config("ratio grid must include 0".into()));
    }
    let mut grid = ratios.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    for &ratio in &grid {
        let mut row = Vec::with_capacity(test.len());
        for (i, s) in test.iter().enumerate() {
            let mut rng = corruption_rng(seed, i, ratio);
            let corrupted = corrupt_transcript(&s.transcript, ratio, &mut rng, lexicon)?;
            let run = system.run_forced(mode, s.units.as_slice(), &corrupted.words, s.target_language)?;
            row.push(similarity(&run.translation, &reference_tokens(system.vocab(), s)));
        }
        scores.push(row);
    }
    let zero = grid.iter().position(|&r| r == 0.0).expect("grid contains 0");
    let base_lang = by_language(test, &scores[zero]);
    let base = mean(&scores[zero]);
    let points = grid
        .iter()
        .zip(&scores)
        .map(|(&ratio, row)| {
            let quality = mean(row);
            let per_language_delta: BTreeMap<LangId, f64> = by_language(test, row)
                .into_iter()
                .map(|(l, q)| (l, q - base_lang[&l]))
                .collect();
            let deltas: Vec<f64> = per_language_delta.values().copied().collect();
            RobustnessPoint {
                ratio,
                quality,
                delta: quality - base,
                std: mean_std(&deltas).1,
                per_language_delta,
            }
        })
        .collect();
    Ok(RobustnessCurve { mode, points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveOutcome {
    pub language: LangId,
    /// `s[h][r]`: similarity of hypothesis `h` to reference `r`, index 0 for
    /// the plain member and 1 for the emphasized one.
    pub s: [[f64; 2]; 2],
    pub directional_a: bool,
    pub directional_b: bool,
    pub global: bool,
    /// Whether both members produced the same intermediate transcript.
    pub same_transcript: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub mode: RunMode,
    /// Percentage of pair members whose hypothesis beats the other member's
    /// hypothesis on its own reference.
    pub d: f64,
    /// Percentage of pairs where both members pass.
    pub g: f64,
    pub outcomes: Vec<ContrastiveOutcome>,
}

/// D and G over a set of outcomes.
pub fn contrastive_scores(outcomes: &[ContrastiveOutcome]) -> (f64, f64) {
    if outcomes.is_empty() {
        return (0.0, 0.0);
    }
    let n = outcomes.len() as f64;
    let members: usize = outcomes
        .iter()
        .map(|o| o.directional_a as usize + o.directional_b as usize)
        .sum();
    let global = outcomes.iter().filter(|o| o.global).count();
    (100.0 * members as f64 / (2.0 * n), 100.0 * global as f64 / n)
}

/// Scores one pair. A member passes when its hypothesis is strictly closer to
/// its own reference than the other member's hypothesis is; ties fail.
pub fn score_pair(
    language: LangId,
    hyp: [&[TokenId]; 2],
    reference: [&[TokenId]; 2],
    same_transcript: bool,
) -> ContrastiveOutcome {
    let mut s = [[0.0; 2]; 2];
    for h in 0..2 {
        for r in 0..2 {
            s[h][r] = similarity(hyp[h], reference[r]);
        }
    }
    let directional_a = s[0][0] > s[1][0];
    let directional_b = s[1][1] > s[0][1];
    ContrastiveOutcome {
        language,
        s,
        directional_a,
        directional_b,
        global: directional_a && directional_b,
        same_transcript,
    }
}

pub fn contrastive_eval<S: S2ttSystem + ?Sized>(
    system: &S,
    pairs: &[ContrastivePair],
    mode: RunMode,
) -> Result<ContrastiveReport> {
    let vocab = system.vocab();
    let mut outcomes = Vec::with_capacity(pairs.len());
    for p in pairs {
        let lang = p.utterance_a.target_language;
        let ra = system.run(mode, p.units_a.as_slice(), lang)?;
        let rb = system.run(mode, p.units_b.as_slice(), lang)?;
        let refs = [
            vocab.targets_to_tokens(lang, &p.reference_a),
            vocab.targets_to_tokens(lang, &p.reference_b),
        ];
        outcomes.push(score_pair(
            lang,
            [&ra.translation, &rb.translation],
            [&refs[0], &refs[1]],
            ra.transcript.is_some() && ra.transcript == rb.transcript,
        ));
    }
    let (d, g) = contrastive_scores(&outcomes);
    Ok(ContrastiveReport { mode, d, g, outcomes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionItem {
    pub item: usize,
    pub language: LangId,
    pub regions: RegionAttribution,
}

/// Value Zeroing over each test item's final translation context. Items whose
/// translation came out empty have no output tokens and are skipped.
pub fn attribution_suite<S: S2ttSystem + ?Sized>(
    system: &S,
    params: &Parameters<f32>,
    test: &[Sample],
    mode: RunMode,
    metric: Distance,
) -> Result<Vec<AttributionItem>> {
    check_test_set(test)?;
    let exact = params.cast::<f64>();
    let mut out = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        let run: TranslationRun = system.run(mode, s.units.as_slice(), s.target_language)?;
        if run.translation.is_empty() {
            log::debug!("item {i}: empty translation, no attribution");
            continue;
        }
        let trace = forward(&exact, &run.prompt, true)?
            .trace
            .expect("trace requested");
        let matrix = value_zeroing_matrix(&exact, &run.prompt, &trace, metric)?;
        out.push(AttributionItem {
            item: i,
            language: s.target_language,
            regions: aggregate_regions(&matrix, &run.layout)?,
        });
    }
    Ok(out)
}

/// Mean region attribution over items (each item weighted equally).
pub fn mean_attribution(items: &[AttributionItem]) -> Result<RegionAttribution> {
    let first = items
        .first()
        .ok_or_else(|| LabError::Data("no attribution items to average".into()))?;
    let n_layers = first.regions.per_layer.len();
    let n = items.len() as f64;
    let avg = |get: &dyn Fn(&RegionAttribution) -> [f64; 4]| {
        let mut acc = [0.0; 4];
        for it in items {
            for (a, v) in acc.iter_mut().zip(get(&it.regions)) {
                *a += v / n;
            }
        }
        crate::attribution::RegionShares::from_array(acc)
    };
    Ok(RegionAttribution {
        per_layer: (0..n_layers)
            .map(|l| avg(&|r: &RegionAttribution| r.per_layer[l].as_array()))
            .collect(),
        mean: avg(&|r: &RegionAttribution| r.mean.as_array()),
    })
}

/// A perfect system built from the lexicon. It parses units exactly. In CoT
/// and Direct modes it sees emphasis; in cascade mode it translates the
/// transcript alone and so always picks the default sense.
#[derive(Clone, Debug)]
pub struct ReferenceOracle<'a> {
    pub lexicon: &'a Lexicon,
    pub vocab: &'a Vocabulary,
}

impl ReferenceOracle<'_> {
    fn parse(&self, units: &[UnitId], language: LangId) -> Result<Utterance> {
        let (words, emphasized_index) = decode_units(self.lexicon, units)
            .into_iter()
            .next()
            .ok_or_else(|| LabError::Data("units do not parse".into()))?;
        Ok(Utterance {
            words,
            emphasized_index,
            target_language: language,
        })
    }

    fn package(&self, mode: RunMode, transcript: Option<Vec<WordId>>, utt: &Utterance) -> Result<TranslationRun> {
        let translation = self
            .vocab
            .targets_to_tokens(utt.target_language, &reference_translation(self.lexicon, utt)?);
        Ok(TranslationRun {
            mode,
            transcript: transcript.map(|w| self.vocab.words_to_tokens(&w)),
            prompt: translation.clone(),
            translation,
            layout: Default::default(),
            truncated: false,
        })
    }
}

impl S2ttSystem for ReferenceOracle<'_> {
    fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    fn run(&self, mode: RunMode, units: &[UnitId], language: LangId) -> Result<TranslationRun> {
        let mut utt = self.parse(units, language)?;
        let transcript = (mode != RunMode::Direct).then(|| utt.words.clone());
        if mode == RunMode::Cascade {
            utt.emphasized_index = None;
        }
        self.package(mode, transcript, &utt)
    }

    fn run_forced(
        &self,
        mode: RunMode,
        units: &[UnitId],
        transcript: &[WordId],
        language: LangId,
    ) -> Result<TranslationRun> {
        let emphasized_index = match mode {
            RunMode::Cot => self.parse(units, language)?.emphasized_index,
            RunMode::Cascade => None,
            RunMode::Direct => {
                return Err(LabError::Config("direct translation has no transcript to force".into()))
            }
        };
        let utt = Utterance {
            words: transcript.to_vec(),
            emphasized_index: emphasized_index
                .filter(|&i| transcript.get(i).is_some_and(|&w| self.lexicon.is_ambiguous(w))),
            target_language: language,
        };
        self.package(mode, Some(transcript.to_vec()), &utt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{build_lexicon, make_contrastive_pairs, make_corpus, CorpusSizes, LexiconSettings};
    use std::collections::HashSet;

    #[test]
    fn similarity_examples() {
        let r: Vec<TokenId> = (0..10).collect();
        assert_eq!(similarity(&r, &r), 1.0);
        assert_eq!(similarity(&[20, 21], &r), 0.0);
        assert!((similarity(&r[..5], &r) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(similarity(&[], &r), 0.0);
        // Clipping: repeated hypothesis tokens only match once.
        assert!((similarity(&[1, 1, 1], &[1, 2, 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert!(similarity(&[2, 1], &[1, 2]) == 1.0);
    }

    fn world() -> (Lexicon, Vocabulary, Vec<Sample>, Vec<ContrastivePair>) {
        let lex = build_lexicon(9, &LexiconSettings::default()).unwrap();
        let vocab = Vocabulary::for_lexicon(&lex);
        let sizes = CorpusSizes {
            s2tt: 40,
            asr: 0,
            t2tt: 0,
            test: 30,
        };
        let corpus = make_corpus(&lex, 4, &sizes, (3, 6), 0.5).unwrap();
        let pairs = make_contrastive_pairs(&lex, 5, 20, (3, 6), &HashSet::new()).unwrap();
        (lex, vocab, corpus.test, pairs)
    }

    #[test]
    fn oracle_quality_is_perfect_and_contrastive_bounds_hold() {
        let (lex, vocab, test, pairs) = world();
        let oracle = ReferenceOracle {
            lexicon: &lex,
            vocab: &vocab,
        };
        for mode in [RunMode::Cot, RunMode::Direct] {
            let q = evaluate_quality(&oracle, &test, mode).unwrap();
            assert_eq!(q.mean, 1.0);
            assert!(q.per_language.values().all(|&v| v == 1.0));
        }
        let cot = contrastive_eval(&oracle, &pairs, RunMode::Cot).unwrap();
        assert_eq!((cot.d, cot.g), (100.0, 100.0));
        let cascade = contrastive_eval(&oracle, &pairs, RunMode::Cascade).unwrap();
        assert_eq!((cascade.d, cascade.g), (0.0, 0.0));
        assert!(cascade.outcomes.iter().all(|o| o.same_transcript));
        for r in [&cot, &cascade] {
            assert!(r.g <= r.d);
        }
    }

    #[test]
    fn robustness_baseline_delta_is_exactly_zero() {
        let (lex, vocab, test, _) = world();
        let oracle = ReferenceOracle {
            lexicon: &lex,
            vocab: &vocab,
        };
        let curve = robustness_sweep(&oracle, &lex, &test, &DEFAULT_RATIO_GRID, RunMode::Cot, 3).unwrap();
        assert_eq!(curve.points.len(), 7);
        assert_eq!(curve.at(0.0).unwrap().delta, 0.0);
        assert!(curve.at(0.3).unwrap().delta < 0.0);
        let again = robustness_sweep(&oracle, &lex, &test, &DEFAULT_RATIO_GRID, RunMode::Cot, 3).unwrap();
        assert_eq!(curve, again);
        // Oracle CoT and cascade read the same corrupted transcripts.
        let cas = robustness_sweep(&oracle, &lex, &test, &DEFAULT_RATIO_GRID, RunMode::Cascade, 3).unwrap();
        assert!(cas.at(0.3).unwrap().delta < 0.0);
        assert!(robustness_sweep(&oracle, &lex, &test, &[0.1], RunMode::Cot, 3).is_err());
    }

    #[test]
    fn tie_semantics() {
        let a: Vec<TokenId> = vec![1, 2, 3];
        let b: Vec<TokenId> = vec![1, 2, 4];
        let o = score_pair(0, [&a, &a], [&a, &b], true);
        assert!(!o.directional_a && !o.directional_b && !o.global);
        let o = score_pair(0, [&a, &b], [&a, &b], false);
        assert!(o.directional_a && o.directional_b && o.global);
        assert_eq!(contrastive_scores(&[o.clone(), score_pair(0, [&a, &a], [&a, &b], true)]), (50.0, 50.0));
    }
}
